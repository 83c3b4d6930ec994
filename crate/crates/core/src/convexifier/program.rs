//! A small conic modeling layer: affine expressions over scalar decision
//! variables, cone memberships, and compilation to the standard form
//! `minimize cᵀv  s.t.  A v + s = b,  s ∈ 𝒦`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

/// Index of a scalar decision variable.
pub type Var = usize;

/// `constant + Σ coeff · v[idx]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffExpr {
    pub constant: f64,
    pub terms: Vec<(Var, f64)>,
}

impl AffExpr {
    pub fn constant(c: f64) -> Self {
        Self { constant: c, terms: Vec::new() }
    }

    pub fn var(v: Var) -> Self {
        Self { constant: 0.0, terms: vec![(v, 1.0)] }
    }

    pub fn add_term(&mut self, v: Var, c: f64) {
        if c != 0.0 {
            self.terms.push((v, c));
        }
    }

    pub fn add(&mut self, other: &AffExpr, scale: f64) {
        self.constant += scale * other.constant;
        for &(v, c) in &other.terms {
            self.add_term(v, scale * c);
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = AffExpr::constant(0.0);
        out.add(self, s);
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }

    /// Merge duplicate variables and drop zero coefficients.
    pub fn canonical(&self) -> Self {
        let mut acc: BTreeMap<Var, f64> = BTreeMap::new();
        for &(v, c) in &self.terms {
            *acc.entry(v).or_insert(0.0) += c;
        }
        Self {
            constant: self.constant,
            terms: acc.into_iter().filter(|&(_, c)| c != 0.0).collect(),
        }
    }
}

/// Dense matrix of affine expressions, column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MatExpr {
    rows: usize,
    cols: usize,
    data: Vec<AffExpr>,
}

impl MatExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![AffExpr::default(); rows * cols] }
    }

    pub fn from_const(m: &DMatrix<f64>) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                out.data[i + j * m.nrows()].constant = m[(i, j)];
            }
        }
        out
    }

    /// Matrix of scalar variables, column-major.
    pub fn from_vars(rows: usize, cols: usize, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), rows * cols);
        Self { rows, cols, data: vars.iter().map(|&v| AffExpr::var(v)).collect() }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &AffExpr {
        &self.data[i + j * self.rows]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut AffExpr {
        &mut self.data[i + j * self.rows]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                *out.get_mut(j, i) = self.get(i, j).clone();
            }
        }
        out
    }

    /// `L · self` for a constant `L`.
    pub fn left_mul(&self, l: &DMatrix<f64>) -> Self {
        assert_eq!(l.ncols(), self.rows);
        let mut out = Self::zeros(l.nrows(), self.cols);
        for j in 0..self.cols {
            for i in 0..l.nrows() {
                let e = out.get_mut(i, j);
                for k in 0..self.rows {
                    let c = l[(i, k)];
                    if c != 0.0 {
                        e.add(&self.data[k + j * self.rows], c);
                    }
                }
            }
        }
        out.canonicalize();
        out
    }

    /// `self · R` for a constant `R`.
    pub fn right_mul(&self, r: &DMatrix<f64>) -> Self {
        assert_eq!(r.nrows(), self.cols);
        let mut out = Self::zeros(self.rows, r.ncols());
        for j in 0..r.ncols() {
            for k in 0..self.cols {
                let c = r[(k, j)];
                if c == 0.0 {
                    continue;
                }
                for i in 0..self.rows {
                    let src = self.data[i + k * self.rows].clone();
                    out.get_mut(i, j).add(&src, c);
                }
            }
        }
        out.canonicalize();
        out
    }

    pub fn add(&self, other: &MatExpr, scale: f64) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            a.add(b, scale);
        }
        out.canonicalize();
        out
    }

    pub fn hstack(parts: &[&MatExpr]) -> Self {
        let rows = parts.first().map_or(0, |p| p.rows);
        assert!(parts.iter().all(|p| p.rows == rows));
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend(p.data.iter().cloned());
        }
        Self { rows, cols, data }
    }

    pub fn columns(&self, start: usize, count: usize) -> Self {
        Self {
            rows: self.rows,
            cols: count,
            data: self.data[start * self.rows..(start + count) * self.rows].to_vec(),
        }
    }

    /// Row `i` as a list of expressions.
    pub fn row(&self, i: usize) -> Vec<AffExpr> {
        (0..self.cols).map(|j| self.get(i, j).clone()).collect()
    }

    pub fn column(&self, j: usize) -> Vec<AffExpr> {
        self.data[j * self.rows..(j + 1) * self.rows].to_vec()
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x))
    }

    pub fn is_constant(&self) -> bool {
        self.data.iter().all(|e| e.terms.is_empty())
    }

    fn canonicalize(&mut self) {
        for e in &mut self.data {
            if e.terms.len() > 1 {
                *e = e.canonical();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    Zero(usize),
    NonNeg(usize),
    /// `(t, x)` with `‖x‖₂ ≤ t`; the dimension counts `t`.
    Soc(usize),
    /// Symmetric `d × d` matrix in the PSD cone.
    Psd(usize),
}

impl Cone {
    /// Length of the slack vector in standard form.
    pub fn slack_dim(&self) -> usize {
        match *self {
            Cone::Zero(n) | Cone::NonNeg(n) | Cone::Soc(n) => n,
            Cone::Psd(d) => d * (d + 1) / 2,
        }
    }
}

/// One conic membership `exprs ∈ cone`, tagged with a family name used for
/// infeasibility diagnosis.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeConstraint {
    pub family: String,
    pub cone: Cone,
    /// For `Psd(d)`: the full `d × d` matrix, column-major. It is
    /// symmetrized when compiled.
    pub exprs: Vec<AffExpr>,
}

/// Problem in standard conic form with a sparse column-compressed `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardForm {
    pub n: usize,
    pub m: usize,
    pub c: Vec<f64>,
    pub colptr: Vec<usize>,
    pub rowval: Vec<usize>,
    pub nzval: Vec<f64>,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
    /// Objective offset, not seen by the solver.
    pub c0: f64,
}

impl StandardForm {
    pub fn nnz(&self) -> usize {
        self.nzval.len()
    }
}

/// Convex program assembled by the builders.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvexProgram {
    names: Vec<String>,
    objective: AffExpr,
    constraints: Vec<ConeConstraint>,
    rigid: Vec<String>,
}

impl ConvexProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn var_name(&self, v: Var) -> &str {
        &self.names[v]
    }

    pub fn constraints(&self) -> &[ConeConstraint] {
        &self.constraints
    }

    pub fn objective(&self) -> &AffExpr {
        &self.objective
    }

    /// Exclude a family from elastic relaxation, e.g. epigraph definitions
    /// that carry no physical requirement.
    pub fn set_rigid(&mut self, family: &str) {
        if !self.rigid.iter().any(|f| f == family) {
            self.rigid.push(family.to_string());
        }
    }

    pub fn new_var(&mut self, name: impl Into<String>) -> Var {
        self.names.push(name.into());
        self.names.len() - 1
    }

    pub fn new_vars(&mut self, name: &str, count: usize) -> Vec<Var> {
        (0..count).map(|i| self.new_var(format!("{name}[{i}]"))).collect()
    }

    pub fn add_objective(&mut self, e: &AffExpr, scale: f64) {
        self.objective.add(e, scale);
        self.objective = self.objective.canonical();
    }

    pub fn add_constraint(&mut self, family: &str, cone: Cone, exprs: Vec<AffExpr>) {
        let expected = match cone {
            Cone::Psd(d) => d * d,
            other => other.slack_dim(),
        };
        assert_eq!(exprs.len(), expected, "constraint '{family}' has wrong length");
        self.constraints.push(ConeConstraint { family: family.to_string(), cone, exprs });
    }

    /// `e = 0` componentwise.
    pub fn add_eq(&mut self, family: &str, exprs: Vec<AffExpr>) {
        let n = exprs.len();
        self.add_constraint(family, Cone::Zero(n), exprs);
    }

    /// `lhs ≤ rhs`.
    pub fn add_le(&mut self, family: &str, lhs: &AffExpr, rhs: &AffExpr) {
        let mut e = rhs.clone();
        e.add(lhs, -1.0);
        self.add_constraint(family, Cone::NonNeg(1), vec![e.canonical()]);
    }

    /// `‖x‖₂ ≤ t`.
    pub fn add_soc(&mut self, family: &str, t: AffExpr, x: Vec<AffExpr>) {
        let mut exprs = Vec::with_capacity(x.len() + 1);
        exprs.push(t);
        exprs.extend(x);
        let n = exprs.len();
        self.add_constraint(family, Cone::Soc(n), exprs);
    }

    /// `M ⪰ 0` for a square symmetric expression matrix.
    pub fn add_psd(&mut self, family: &str, m: &MatExpr) {
        assert_eq!(m.nrows(), m.ncols());
        self.add_constraint(family, Cone::Psd(m.nrows()), m.data.clone());
    }

    /// Epigraph of the spectral norm, `‖M‖₂ ≤ t`, encoded exactly.
    ///
    /// Vectors use one second-order cone. Otherwise the short side of `M`
    /// (`m` rows after an optional transpose) is kept and the long side split
    /// into chunks `M_i` of at most `chunk` columns, with
    /// `[[W_i, M_i], [M_iᵀ, t I]] ⪰ 0` and `t I − Σ W_i ⪰ 0`. The two
    /// imply `M Mᵀ ⪯ t² I`, and `W_i = M_i M_iᵀ / t` shows the converse.
    pub fn add_spectral_norm_le(&mut self, family: &str, m: &MatExpr, t: &AffExpr, chunk: usize) {
        let m = if m.nrows() > m.ncols() { m.transpose() } else { m.clone() };
        let (rows, cols) = (m.nrows(), m.ncols());
        if rows == 0 || cols == 0 {
            self.add_constraint(family, Cone::NonNeg(1), vec![t.clone()]);
            return;
        }
        if rows == 1 {
            self.add_soc(family, t.clone(), m.row(0));
            return;
        }
        if cols == 1 {
            self.add_soc(family, t.clone(), m.column(0));
            return;
        }
        let chunk = chunk.max(1);
        if cols <= chunk {
            self.add_psd(family, &norm_block(&identity_times(rows, t), &m, t));
            return;
        }
        let mut sum_w = identity_times(rows, t);
        let mut start = 0;
        while start < cols {
            let width = chunk.min(cols - start);
            let part = m.columns(start, width);
            let w = self.new_sym_matrix(&format!("{family}.W"), rows);
            self.add_psd(family, &norm_block(&w, &part, t));
            sum_w = sum_w.add(&w, -1.0);
            start += width;
        }
        self.add_psd(family, &sum_w);
    }

    fn new_sym_matrix(&mut self, name: &str, d: usize) -> MatExpr {
        let mut out = MatExpr::zeros(d, d);
        for j in 0..d {
            for i in 0..=j {
                let v = self.new_var(format!("{name}[{i},{j}]"));
                *out.get_mut(i, j) = AffExpr::var(v);
                *out.get_mut(j, i) = AffExpr::var(v);
            }
        }
        out
    }

    /// Compile to standard form. With `elastic`, every constraint family
    /// gets a nonnegative slack that relaxes it, and the objective is
    /// replaced by the sum of those slacks (a phase-one problem). The slack
    /// variables are appended after the program's variables in family order.
    pub fn compile(&self, elastic: bool) -> (StandardForm, Vec<String>) {
        let nvars = self.num_vars();
        let families: Vec<String> = if elastic {
            let mut seen: Vec<String> = Vec::new();
            for c in &self.constraints {
                if !seen.contains(&c.family) && !self.rigid.contains(&c.family) {
                    seen.push(c.family.clone());
                }
            }
            seen
        } else {
            Vec::new()
        };
        let n = nvars + families.len();
        let family_slack = |name: &str| families.iter().position(|f| f == name).map(|i| nvars + i);

        let mut rows: Vec<AffExpr> = Vec::new();
        let mut cones: Vec<Cone> = Vec::new();
        let sqrt2 = std::f64::consts::SQRT_2;
        for c in &self.constraints {
            let slack = family_slack(&c.family);
            match c.cone {
                Cone::Zero(k) if slack.is_some() => {
                    let s = slack.unwrap();
                    for e in &c.exprs {
                        let mut up = e.clone();
                        up.add_term(s, 1.0);
                        let mut dn = e.scaled(-1.0);
                        dn.add_term(s, 1.0);
                        rows.push(up);
                        rows.push(dn);
                    }
                    cones.push(Cone::NonNeg(2 * k));
                }
                Cone::Zero(_) => {
                    rows.extend(c.exprs.iter().cloned());
                    cones.push(c.cone);
                }
                Cone::NonNeg(_) => {
                    for e in &c.exprs {
                        let mut e = e.clone();
                        if let Some(s) = slack {
                            e.add_term(s, 1.0);
                        }
                        rows.push(e);
                    }
                    cones.push(c.cone);
                }
                Cone::Soc(_) => {
                    let mut t = c.exprs[0].clone();
                    if let Some(s) = slack {
                        t.add_term(s, 1.0);
                    }
                    rows.push(t);
                    rows.extend(c.exprs[1..].iter().cloned());
                    cones.push(c.cone);
                }
                Cone::Psd(d) => {
                    // Upper triangle, column by column, off-diagonals × √2.
                    for j in 0..d {
                        for i in 0..=j {
                            let mut e = if i == j {
                                c.exprs[i + j * d].clone()
                            } else {
                                let mut e = c.exprs[i + j * d].scaled(0.5);
                                e.add(&c.exprs[j + i * d], 0.5);
                                e.scaled(sqrt2)
                            };
                            if i == j {
                                if let Some(s) = slack {
                                    e.add_term(s, 1.0);
                                }
                            }
                            rows.push(e);
                        }
                    }
                    cones.push(c.cone);
                }
            }
        }

        // A = −E, b = e₀ so that s = b − A v = e₀ + E v.
        let m = rows.len();
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut b = vec![0.0; m];
        for (r, e) in rows.iter().enumerate() {
            let e = e.canonical();
            b[r] = e.constant;
            for (v, coef) in e.terms {
                cols[v].push((r, -coef));
            }
        }
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for col in cols {
            for (r, v) in col {
                rowval.push(r);
                nzval.push(v);
            }
            colptr.push(rowval.len());
        }

        let mut c = vec![0.0; n];
        let c0;
        if elastic {
            for ci in c.iter_mut().skip(nvars) {
                *ci = 1.0;
            }
            c0 = 0.0;
        } else {
            for &(v, coef) in &self.objective.terms {
                c[v] += coef;
            }
            c0 = self.objective.constant;
        }
        if elastic {
            // Slacks are nonnegative.
            let base = m;
            let mut extra_b = Vec::new();
            for (i, _) in families.iter().enumerate() {
                extra_b.push(0.0);
                let col = nvars + i;
                // Insert −1 in column `col` at row base + i, keeping rows sorted.
                let pos = colptr[col + 1];
                rowval.insert(pos, base + i);
                nzval.insert(pos, -1.0);
                for p in colptr.iter_mut().skip(col + 1) {
                    *p += 1;
                }
            }
            b.extend(extra_b);
            cones.push(Cone::NonNeg(families.len()));
        }
        let m = b.len();
        (StandardForm { n, m, c, colptr, rowval, nzval, b, cones, c0 }, families)
    }

    /// Largest violation of each constraint at `x`, by family. SOC and PSD
    /// violations are measured as cone distances in the natural sense
    /// (`‖x‖ − t`, `−λ_min`).
    pub fn violations(&self, x: &[f64]) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for c in &self.constraints {
            let vals: Vec<f64> = c.exprs.iter().map(|e| e.eval(x)).collect();
            let v = match c.cone {
                Cone::Zero(_) => vals.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
                Cone::NonNeg(_) => vals.iter().fold(0.0_f64, |a, v| a.max(-v)),
                Cone::Soc(_) => {
                    let nrm = vals[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                    (nrm - vals[0]).max(0.0)
                }
                Cone::Psd(d) => {
                    let m = DMatrix::from_column_slice(d, d, &vals);
                    (-crate::linalg::min_eigenvalue(&m)).max(0.0)
                }
            };
            let e = out.entry(c.family.clone()).or_insert(0.0);
            *e = e.max(v);
        }
        out
    }
}

fn identity_times(d: usize, t: &AffExpr) -> MatExpr {
    let mut out = MatExpr::zeros(d, d);
    for i in 0..d {
        *out.get_mut(i, i) = t.clone();
    }
    out
}

/// `[[top_left, m], [mᵀ, t I]]`.
fn norm_block(top_left: &MatExpr, m: &MatExpr, t: &AffExpr) -> MatExpr {
    let (r, c) = (m.nrows(), m.ncols());
    let d = r + c;
    let mut out = MatExpr::zeros(d, d);
    for j in 0..r {
        for i in 0..r {
            *out.get_mut(i, j) = top_left.get(i, j).clone();
        }
    }
    for j in 0..c {
        for i in 0..r {
            *out.get_mut(i, r + j) = m.get(i, j).clone();
            *out.get_mut(r + j, i) = m.get(i, j).clone();
        }
        *out.get_mut(r + j, r + j) = t.clone();
    }
    out
}
