//! Linear programs over non-negative variables and a dense two-phase simplex solver.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

impl fmt::Display for Sense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sense::Le => "<=",
            Sense::Ge => ">=",
            Sense::Eq => "=",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

impl Constraint {
    pub fn lhs(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * x[j]).sum()
    }
}

/// Maximize `objective · x` subject to `constraints`, `x >= 0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearProgram {
    pub variables: Vec<String>,
    pub constraints: Vec<Constraint>,
    pub objective: Vec<(usize, f64)>,
}

impl LinearProgram {
    pub fn new() -> Self {
        LinearProgram::default()
    }

    pub fn add_variable(&mut self, name: impl Into<String>) -> usize {
        self.variables.push(name.into());
        self.variables.len() - 1
    }

    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        terms: Vec<(usize, f64)>,
        sense: Sense,
        rhs: f64,
    ) -> usize {
        self.constraints.push(Constraint {
            name: name.into(),
            terms: merge_terms(terms),
            sense,
            rhs,
        });
        self.constraints.len() - 1
    }

    pub fn set_objective(&mut self, terms: Vec<(usize, f64)>) {
        self.objective = merge_terms(terms);
    }

    fn check(&self) -> Result<()> {
        let n = self.variables.len();
        let bad = |(j, a): &(usize, f64)| *j >= n || !a.is_finite();
        if self.objective.iter().any(bad) {
            return Err(Error::InvalidArgument("objective references a bad term".into()));
        }
        for c in &self.constraints {
            if c.terms.iter().any(bad) || !c.rhs.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "constraint `{}` has a non-finite or out-of-range term",
                    c.name
                )));
            }
        }
        Ok(())
    }

    /// Human-readable constraint listing.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let expr = |terms: &[(usize, f64)]| {
            if terms.is_empty() {
                return "0".to_string();
            }
            let mut e = String::new();
            for (k, &(j, a)) in terms.iter().enumerate() {
                let sign = if a < 0.0 { "-" } else if k > 0 { "+" } else { "" };
                if k > 0 {
                    e.push(' ');
                }
                let _ = write!(e, "{sign}{} {}", fmt_num(a.abs()), self.variables[j]);
            }
            e
        };
        let _ = writeln!(s, "maximize");
        let _ = writeln!(s, "  {}", expr(&self.objective));
        let _ = writeln!(s, "subject to");
        for c in &self.constraints {
            let _ = writeln!(
                s,
                "  {}: {} {} {}",
                c.name,
                expr(&c.terms),
                c.sense,
                fmt_num(c.rhs)
            );
        }
        let _ = writeln!(s, "bounds");
        let _ = writeln!(s, "  all {} variables >= 0", self.variables.len());
        s
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:.9}")
        .trim_end_matches('0')
        .trim_end_matches('.')
        .to_string()
}

fn merge_terms(mut terms: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    terms.sort_by_key(|t| t.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
    for (j, a) in terms {
        match out.last_mut() {
            Some(last) if last.0 == j => last.1 += a,
            _ => out.push((j, a)),
        }
    }
    out.retain(|t| t.1 != 0.0);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub objective: f64,
    pub values: Vec<f64>,
    /// `lhs - rhs` per constraint.
    pub slacks: Vec<f64>,
    /// Indices of inequality constraints that bind at the optimum.
    pub tight: Vec<usize>,
    pub pivots: usize,
}

const EPS: f64 = 1e-9;
const TIGHT_REL: f64 = 1e-6;
/// Degenerate pivots tolerated under largest-coefficient pricing before falling back to
/// Bland's rule.
const DEGENERATE_STREAK: usize = 50;

/// Solves `lp` exactly up to floating point tolerances. Identical input gives identical output.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution> {
    lp.check()?;
    let mut t = Tableau::build(lp);
    let limit = 50 * (t.rows + t.cols) + 1000;

    if t.n_art > 0 {
        t.set_phase1_objective();
        t.run(limit, false)?;
        let infeas = t.obj[t.cols];
        if infeas > 1e-7 * (1.0 + t.rhs_scale) {
            return Err(Error::Infeasible(format!(
                "phase one ended with residual {infeas:.3e}"
            )));
        }
        t.drive_out_artificials();
    }
    t.set_phase2_objective(lp);
    t.run(limit, true)?;

    let mut values = vec![0.0; lp.variables.len()];
    for (i, &b) in t.basis.iter().enumerate() {
        if b < lp.variables.len() {
            values[b] = t.at(i, t.cols).max(0.0);
        }
    }
    let objective = lp.objective.iter().map(|&(j, c)| c * values[j]).sum();
    let mut slacks = Vec::with_capacity(lp.constraints.len());
    let mut tight = Vec::new();
    for (k, c) in lp.constraints.iter().enumerate() {
        let s = c.lhs(&values) - c.rhs;
        if c.sense != Sense::Eq && s.abs() <= TIGHT_REL * c.rhs.abs().max(1.0) {
            tight.push(k);
        }
        slacks.push(s);
    }
    Ok(LpSolution {
        objective,
        values,
        slacks,
        tight,
        pivots: t.pivots,
    })
}

struct Tableau {
    rows: usize,
    /// Structural + slack + artificial columns (the rhs lives at index `cols`).
    cols: usize,
    art_start: usize,
    n_art: usize,
    data: Vec<f64>,
    obj: Vec<f64>,
    basis: Vec<usize>,
    pivots: usize,
    rhs_scale: f64,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Tableau {
        let n = lp.variables.len();
        let m = lp.constraints.len();
        // Normalize each row: non-negative rhs, unit max coefficient.
        let mut rows: Vec<(Vec<(usize, f64)>, Sense, f64)> = lp
            .constraints
            .iter()
            .map(|c| {
                let scale = c.terms.iter().fold(0.0f64, |a, t| a.max(t.1.abs()));
                let scale = if scale > 0.0 { scale } else { 1.0 };
                let flip = c.rhs < 0.0;
                let k = if flip { -1.0 / scale } else { 1.0 / scale };
                let sense = match (c.sense, flip) {
                    (Sense::Le, true) => Sense::Ge,
                    (Sense::Ge, true) => Sense::Le,
                    (s, _) => s,
                };
                let terms = c.terms.iter().map(|&(j, a)| (j, a * k)).collect();
                (terms, sense, c.rhs * k)
            })
            .collect();
        let n_slack = rows.iter().filter(|r| r.1 != Sense::Eq).count();
        let n_art = rows.iter().filter(|r| r.1 != Sense::Le).count();
        let art_start = n + n_slack;
        let cols = art_start + n_art;
        let width = cols + 1;
        let mut data = vec![0.0; m * width];
        let mut basis = vec![0; m];
        let (mut next_slack, mut next_art) = (n, art_start);
        let mut rhs_scale = 0.0f64;
        for (i, (terms, sense, rhs)) in rows.iter_mut().enumerate() {
            let row = &mut data[i * width..(i + 1) * width];
            for &(j, a) in terms.iter() {
                row[j] += a;
            }
            row[cols] = *rhs;
            rhs_scale = rhs_scale.max(rhs.abs());
            match sense {
                Sense::Le => {
                    row[next_slack] = 1.0;
                    basis[i] = next_slack;
                    next_slack += 1;
                }
                Sense::Ge => {
                    row[next_slack] = -1.0;
                    next_slack += 1;
                    row[next_art] = 1.0;
                    basis[i] = next_art;
                    next_art += 1;
                }
                Sense::Eq => {
                    row[next_art] = 1.0;
                    basis[i] = next_art;
                    next_art += 1;
                }
            }
        }
        Tableau {
            rows: m,
            cols,
            art_start,
            n_art,
            data,
            obj: vec![0.0; width],
            basis,
            pivots: 0,
            rhs_scale,
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.cols + 1) + j]
    }

    /// Maximize `-sum(artificials)`.
    fn set_phase1_objective(&mut self) {
        let width = self.cols + 1;
        self.obj.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.rows {
            if self.basis[i] >= self.art_start {
                let row = &self.data[i * width..(i + 1) * width];
                for (o, &a) in self.obj.iter_mut().zip(row) {
                    *o += a;
                }
            }
        }
        for j in self.art_start..self.cols {
            self.obj[j] = 0.0;
        }
        // obj[cols] holds -z; with z = -sum(artificials) that is the residual sum itself.
    }

    fn set_phase2_objective(&mut self, lp: &LinearProgram) {
        let width = self.cols + 1;
        let mut c = vec![0.0; width];
        for &(j, v) in &lp.objective {
            c[j] = v;
        }
        let mut obj = c.clone();
        obj[self.cols] = 0.0;
        for i in 0..self.rows {
            let cb = c[self.basis[i]];
            if cb != 0.0 {
                let row = &self.data[i * width..(i + 1) * width];
                for (o, &a) in obj.iter_mut().zip(row) {
                    *o -= cb * a;
                }
            }
        }
        for j in self.art_start..self.cols {
            obj[j] = 0.0;
        }
        self.obj = obj;
    }

    fn entering(&self, phase2: bool, bland: bool) -> Option<usize> {
        let last = if phase2 { self.art_start } else { self.cols };
        if bland {
            return (0..last).find(|&j| self.obj[j] > EPS);
        }
        let mut best = None;
        let mut best_v = EPS;
        for j in 0..last {
            if self.obj[j] > best_v {
                best_v = self.obj[j];
                best = Some(j);
            }
        }
        best
    }

    fn leaving(&self, col: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.rows {
            let a = self.at(i, col);
            if a > EPS {
                let ratio = self.at(i, self.cols).max(0.0) / a;
                best = match best {
                    None => Some((i, ratio)),
                    Some((bi, br)) => {
                        let tie = (ratio - br).abs() <= EPS * br.abs().max(1.0);
                        if ratio < br && !tie || tie && self.basis[i] < self.basis[bi] {
                            Some((i, ratio))
                        } else {
                            Some((bi, br))
                        }
                    }
                };
            }
        }
        best.map(|b| b.0)
    }

    fn run(&mut self, limit: usize, phase2: bool) -> Result<()> {
        let mut streak = 0usize;
        loop {
            let bland = streak >= DEGENERATE_STREAK;
            let Some(col) = self.entering(phase2, bland) else {
                return Ok(());
            };
            let Some(row) = self.leaving(col) else {
                if phase2 {
                    return Err(Error::Unbounded);
                }
                // Phase one is bounded below by zero; an unbounded ray means numerical trouble.
                return Err(Error::Infeasible("phase one lost boundedness".into()));
            };
            if self.at(row, self.cols) <= EPS {
                streak += 1;
            } else {
                streak = 0;
            }
            self.pivot(row, col);
            if self.pivots > limit {
                return Err(Error::IterationLimit(self.pivots));
            }
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let width = self.cols + 1;
        let p = self.at(r, c);
        {
            let row = &mut self.data[r * width..(r + 1) * width];
            for v in row.iter_mut() {
                *v /= p;
            }
            row[c] = 1.0;
        }
        let pivot_row: Vec<f64> = self.data[r * width..(r + 1) * width].to_vec();
        let nz: Vec<usize> = (0..width).filter(|&j| pivot_row[j] != 0.0).collect();
        for i in 0..self.rows {
            if i == r {
                continue;
            }
            let f = self.data[i * width + c];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.data[i * width..(i + 1) * width];
            for &j in &nz {
                row[j] -= f * pivot_row[j];
            }
            row[c] = 0.0;
            if row[self.cols].abs() < 1e-13 {
                row[self.cols] = 0.0;
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for &j in &nz {
                self.obj[j] -= f * pivot_row[j];
            }
            self.obj[c] = 0.0;
        }
        self.basis[r] = c;
        self.pivots += 1;
    }

    /// Pivots zero-valued artificials out of the basis where possible; rows where that is
    /// impossible are redundant and keep a zero artificial.
    fn drive_out_artificials(&mut self) {
        for i in 0..self.rows {
            if self.basis[i] < self.art_start {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for j in 0..self.art_start {
                let a = self.at(i, j).abs();
                if a > 1e-7 && best.is_none_or(|b| a > b.1) {
                    best = Some((j, a));
                }
            }
            if let Some((j, _)) = best {
                self.pivot(i, j);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bound() {
        let mut lp = LinearProgram::new();
        let x = lp.add_variable("x");
        lp.add_constraint("cap", vec![(x, 1.0)], Sense::Le, 5.0);
        lp.set_objective(vec![(x, 1.0)]);
        let s = solve_lp(&lp).unwrap();
        assert!((s.objective - 5.0).abs() < 1e-9);
        assert_eq!(s.tight, vec![0]);
    }

    #[test]
    fn two_path_max_flow() {
        // s -> a -> t (capacity 3) and s -> b -> t (capacity 4).
        let mut lp = LinearProgram::new();
        let sa = lp.add_variable("sa");
        let at = lp.add_variable("at");
        let sb = lp.add_variable("sb");
        let bt = lp.add_variable("bt");
        lp.add_constraint("a", vec![(sa, 1.0), (at, -1.0)], Sense::Eq, 0.0);
        lp.add_constraint("b", vec![(sb, 1.0), (bt, -1.0)], Sense::Eq, 0.0);
        lp.add_constraint("cap_a", vec![(at, 1.0)], Sense::Le, 3.0);
        lp.add_constraint("cap_b", vec![(bt, 1.0)], Sense::Le, 4.0);
        lp.set_objective(vec![(sa, 1.0), (sb, 1.0)]);
        let s = solve_lp(&lp).unwrap();
        assert!((s.objective - 7.0).abs() < 1e-9);
    }

    #[test]
    fn redundant_equalities_terminate() {
        let mut lp = LinearProgram::new();
        let x = lp.add_variable("x");
        let y = lp.add_variable("y");
        for k in 0..6 {
            lp.add_constraint(format!("eq{k}"), vec![(x, 1.0), (y, -1.0)], Sense::Eq, 0.0);
            lp.add_constraint(
                format!("eq2_{k}"),
                vec![(x, 2.0), (y, -2.0)],
                Sense::Eq,
                0.0,
            );
        }
        lp.add_constraint("cap", vec![(x, 1.0), (y, 1.0)], Sense::Le, 10.0);
        lp.add_constraint("cap2", vec![(x, 2.0), (y, 2.0)], Sense::Le, 20.0);
        lp.set_objective(vec![(x, 1.0)]);
        let s = solve_lp(&lp).unwrap();
        assert!((s.values[0] - 5.0).abs() < 1e-9);
        assert!((s.values[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let mut lp = LinearProgram::new();
        let x = lp.add_variable("x");
        lp.add_constraint("lo", vec![(x, 1.0)], Sense::Ge, 3.0);
        lp.add_constraint("hi", vec![(x, 1.0)], Sense::Le, 2.0);
        lp.set_objective(vec![(x, 1.0)]);
        assert!(matches!(solve_lp(&lp), Err(Error::Infeasible(_))));

        let mut lp = LinearProgram::new();
        let x = lp.add_variable("x");
        lp.add_constraint("lo", vec![(x, 1.0)], Sense::Ge, 1.0);
        lp.set_objective(vec![(x, 1.0)]);
        assert!(matches!(solve_lp(&lp), Err(Error::Unbounded)));
    }

    #[test]
    fn negative_rhs_rows_are_flipped() {
        let mut lp = LinearProgram::new();
        let x = lp.add_variable("x");
        lp.add_constraint("neg", vec![(x, -1.0)], Sense::Le, -2.0);
        lp.add_constraint("cap", vec![(x, 1.0)], Sense::Le, 4.0);
        lp.set_objective(vec![(x, -1.0)]);
        let s = solve_lp(&lp).unwrap();
        assert!((s.values[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn classic_textbook_problem() {
        // max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), 36.
        let mut lp = LinearProgram::new();
        let x = lp.add_variable("x");
        let y = lp.add_variable("y");
        lp.add_constraint("c1", vec![(x, 1.0)], Sense::Le, 4.0);
        lp.add_constraint("c2", vec![(y, 2.0)], Sense::Le, 12.0);
        lp.add_constraint("c3", vec![(x, 3.0), (y, 2.0)], Sense::Le, 18.0);
        lp.set_objective(vec![(x, 3.0), (y, 5.0)]);
        let s = solve_lp(&lp).unwrap();
        assert!((s.objective - 36.0).abs() < 1e-9);
        assert_eq!(s.tight, vec![1, 2]);
    }

    #[test]
    fn dump_lists_every_row() {
        let mut lp = LinearProgram::new();
        let x = lp.add_variable("x");
        let y = lp.add_variable("y");
        lp.add_constraint("mix", vec![(x, 0.5), (y, -2.0)], Sense::Ge, 1.0);
        lp.set_objective(vec![(x, 1.0)]);
        let text = lp.to_text();
        assert!(text.contains("mix: 0.5 x -2 y >= 1"));
        assert!(text.contains("maximize"));
    }
}
