//! First-order finite-difference Saint-Venant solver on a periodic grid.
//!
//! Fields are stored row-major with `ny` rows and `nx` columns; `x` runs
//! along columns and `y` along rows. Velocities are staggered: `u[r][c]`
//! sits on the face between cells `c` and `c+1`, `v[r][c]` between rows `r`
//! and `r+1`. With that layout the pressure gradient is a forward
//! difference, the height update a backward difference of face fluxes, and
//! the total height telescopes exactly.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwConfig {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    /// Time step (s).
    pub dt: f64,
    pub g: f64,
    /// Linear damping.
    pub b: f64,
}

impl Default for SwConfig {
    fn default() -> Self {
        Self {
            nx: 100,
            ny: 100,
            dx: 1.0,
            dy: 1.0,
            dt: 1e-6,
            g: 1.0,
            b: 0.0,
        }
    }
}

impl SwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::InvalidParameter(format!("grid must be at least 2x2, got {}x{}", self.nx, self.ny)));
        }
        for (name, v) in [("dx", self.dx), ("dy", self.dy), ("dt", self.dt), ("g", self.g)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::InvalidParameter(format!("damping b must be non-negative, got {}", self.b)));
        }
        Ok(())
    }

    pub fn courant(&self, h_max: f64) -> f64 {
        (self.g * h_max).sqrt() * self.dt / self.dx.min(self.dy)
    }

    pub fn check_cfl(&self, h_max: f64) -> Result<()> {
        let courant = self.courant(h_max);
        if !(courant < 1.0) {
            return Err(Error::Cfl { courant });
        }
        Ok(())
    }

    /// Number of steps covering `duration` seconds, which must be a
    /// multiple of `dt` (to 1e-9 relative).
    pub fn steps_for(&self, duration: f64) -> Result<usize> {
        let n = duration / self.dt;
        let rounded = n.round();
        if !(duration >= 0.0) || (n - rounded).abs() > 1e-9 * rounded.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "duration {duration} s is not a multiple of dt = {} s",
                self.dt
            )));
        }
        Ok(rounded as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub nx: usize,
    pub ny: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub h: Vec<f64>,
    pub time: f64,
}

impl FlowState {
    pub fn still_water(nx: usize, ny: usize, height: f64) -> Self {
        Self {
            nx,
            ny,
            u: vec![0.0; nx * ny],
            v: vec![0.0; nx * ny],
            h: vec![height; nx * ny],
            time: 0.0,
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.nx + col
    }

    pub fn total_height(&self) -> f64 {
        self.h.iter().sum()
    }

    pub fn max_height(&self) -> f64 {
        self.h.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cylinder {
    /// `[x, y]` = `[col, row]`.
    pub center: [f64; 2],
    pub radius: f64,
    pub base_height: f64,
    pub bump: f64,
}

impl Default for Cylinder {
    fn default() -> Self {
        Self {
            center: [50.0, 50.0],
            radius: 10.0,
            base_height: 1.0,
            bump: 0.1,
        }
    }
}

/// Still water of `base_height` with a raised disk (cells whose centre is
/// strictly inside `radius`).
pub fn init_cylinder(cfg: &SwConfig, cyl: &Cylinder) -> Result<FlowState> {
    cfg.validate()?;
    if !(cyl.radius > 0.0) || cyl.radius >= cfg.nx.min(cfg.ny) as f64 / 2.0 {
        return Err(Error::InvalidParameter(format!(
            "cylinder radius {} must be positive and below half the grid size",
            cyl.radius
        )));
    }
    if !(cyl.base_height > 0.0) || !(cyl.base_height + cyl.bump > 0.0) {
        return Err(Error::InvalidParameter("initial height must be positive everywhere".into()));
    }
    let mut s = FlowState::still_water(cfg.nx, cfg.ny, cyl.base_height);
    for r in 0..cfg.ny {
        for c in 0..cfg.nx {
            let (dx, dy) = (c as f64 - cyl.center[0], r as f64 - cyl.center[1]);
            if (dx * dx + dy * dy).sqrt() < cyl.radius {
                let i = s.idx(r, c);
                s.h[i] += cyl.bump;
            }
        }
    }
    cfg.check_cfl(s.max_height())?;
    Ok(s)
}

fn check_shape(cfg: &SwConfig, s: &FlowState) -> Result<()> {
    let n = cfg.nx * cfg.ny;
    if s.nx != cfg.nx || s.ny != cfg.ny || s.u.len() != n || s.v.len() != n || s.h.len() != n {
        return Err(Error::dims(
            "flow state",
            format!("{}x{}", cfg.ny, cfg.nx),
            format!("{}x{}", s.ny, s.nx),
        ));
    }
    Ok(())
}

/// One forward-Euler step with periodic wrap. `step_index` only labels a
/// blow-up error.
pub fn step(s: &FlowState, cfg: &SwConfig, step_index: usize) -> Result<FlowState> {
    check_shape(cfg, s)?;
    let (nx, ny) = (cfg.nx, cfg.ny);
    let (dt, g, b) = (cfg.dt, cfg.g, cfg.b);
    let mut next = FlowState {
        nx,
        ny,
        u: vec![0.0; nx * ny],
        v: vec![0.0; nx * ny],
        h: vec![0.0; nx * ny],
        time: s.time + dt,
    };
    // face fluxes u·h and v·h with face-averaged height
    let mut fx = vec![0.0; nx * ny];
    let mut fy = vec![0.0; nx * ny];
    for r in 0..ny {
        let rn = if r + 1 == ny { 0 } else { r + 1 };
        for c in 0..nx {
            let cn = if c + 1 == nx { 0 } else { c + 1 };
            let i = r * nx + c;
            let (h, he, hn) = (s.h[i], s.h[r * nx + cn], s.h[rn * nx + c]);
            next.u[i] = s.u[i] - dt * (g * (he - h) / cfg.dx + b * s.u[i]);
            next.v[i] = s.v[i] - dt * (g * (hn - h) / cfg.dy + b * s.v[i]);
            fx[i] = s.u[i] * 0.5 * (h + he);
            fy[i] = s.v[i] * 0.5 * (h + hn);
        }
    }
    for r in 0..ny {
        let rp = if r == 0 { ny - 1 } else { r - 1 };
        for c in 0..nx {
            let cp = if c == 0 { nx - 1 } else { c - 1 };
            let i = r * nx + c;
            let div = (fx[i] - fx[r * nx + cp]) / cfg.dx + (fy[i] - fy[rp * nx + c]) / cfg.dy;
            next.h[i] = s.h[i] - dt * div;
        }
    }
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !finite(&next.u) || !finite(&next.v) || !next.h.iter().all(|&h| h > 0.0 && h.is_finite()) {
        return Err(Error::BlowUp { step: step_index });
    }
    Ok(next)
}

pub fn integrate(s: &FlowState, cfg: &SwConfig, n_steps: usize) -> Result<FlowState> {
    cfg.validate()?;
    cfg.check_cfl(s.max_height())?;
    let mut cur = s.clone();
    for k in 0..n_steps {
        cur = step(&cur, cfg, k)?;
    }
    Ok(cur)
}

/// Rectangular subdomain of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Default for Window {
    fn default() -> Self {
        Self {
            row0: 50,
            col0: 60,
            rows: 10,
            cols: 10,
        }
    }
}

impl Window {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Length of the extracted `(u, v)` state vector.
    pub fn state_dim(&self) -> usize {
        2 * self.cells()
    }

    pub fn validate(&self, nx: usize, ny: usize) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.row0 + self.rows > ny || self.col0 + self.cols > nx {
            return Err(Error::InvalidParameter(format!(
                "window rows {}..{} cols {}..{} does not fit a {ny}x{nx} grid",
                self.row0,
                self.row0 + self.rows,
                self.col0,
                self.col0 + self.cols
            )));
        }
        Ok(())
    }
}

/// `(u, v)` inside the window as one vector: `u` first, then `v`, each
/// row-major within the window.
pub fn extract_subdomain(s: &FlowState, w: &Window) -> Result<DVector<f64>> {
    w.validate(s.nx, s.ny)?;
    let n = w.cells();
    let mut x = DVector::zeros(2 * n);
    for r in 0..w.rows {
        for c in 0..w.cols {
            let i = s.idx(w.row0 + r, w.col0 + c);
            x[r * w.cols + c] = s.u[i];
            x[n + r * w.cols + c] = s.v[i];
        }
    }
    Ok(x)
}

/// Inverse of [`extract_subdomain`]: writes the window's `(u, v)` into `s`.
pub fn embed_subdomain(s: &mut FlowState, w: &Window, x: &DVector<f64>) -> Result<()> {
    w.validate(s.nx, s.ny)?;
    let n = w.cells();
    if x.len() != 2 * n {
        return Err(Error::dims("subdomain state", 2 * n, x.len()));
    }
    for r in 0..w.rows {
        for c in 0..w.cols {
            let i = s.idx(w.row0 + r, w.col0 + c);
            s.u[i] = x[r * w.cols + c];
            s.v[i] = x[n + r * w.cols + c];
        }
    }
    Ok(())
}

/// Reference run that keeps the one-cell ring around a window at every step
/// plus full snapshots at selected steps. Forecasts of the window alone can
/// then be driven by exact boundary data.
#[derive(Clone, Debug)]
pub struct ReferenceTrajectory {
    cfg: SwConfig,
    window: Window,
    /// Padded window geometry (window grown by one cell on each side).
    padded: Window,
    ring: Vec<usize>,
    /// `halo[k]` = ring values of `(u, v, h)` after `k` steps.
    halo: Vec<Vec<f64>>,
    snapshots: Vec<(usize, FlowState)>,
}

impl ReferenceTrajectory {
    /// Integrates `total_steps` from `initial`, keeping full snapshots at
    /// `snapshot_steps`. The window must not touch the grid edge.
    pub fn compute(
        cfg: &SwConfig,
        initial: &FlowState,
        window: &Window,
        total_steps: usize,
        snapshot_steps: &[usize],
    ) -> Result<Self> {
        cfg.validate()?;
        check_shape(cfg, initial)?;
        window.validate(cfg.nx, cfg.ny)?;
        if window.row0 == 0 || window.col0 == 0 || window.row0 + window.rows >= cfg.ny || window.col0 + window.cols >= cfg.nx {
            return Err(Error::InvalidParameter("window must leave a one-cell margin inside the grid".into()));
        }
        if let Some(&s) = snapshot_steps.iter().find(|&&s| s > total_steps) {
            return Err(Error::InvalidParameter(format!("snapshot step {s} beyond {total_steps} steps")));
        }
        cfg.check_cfl(initial.max_height())?;
        let padded = Window {
            row0: window.row0 - 1,
            col0: window.col0 - 1,
            rows: window.rows + 2,
            cols: window.cols + 2,
        };
        let mut ring = Vec::new();
        for r in 0..padded.rows {
            for c in 0..padded.cols {
                if r == 0 || c == 0 || r + 1 == padded.rows || c + 1 == padded.cols {
                    ring.push(r * padded.cols + c);
                }
            }
        }
        let mut traj = Self {
            cfg: *cfg,
            window: *window,
            padded,
            ring,
            halo: Vec::with_capacity(total_steps + 1),
            snapshots: Vec::new(),
        };
        let mut cur = initial.clone();
        for k in 0..=total_steps {
            if k > 0 {
                cur = step(&cur, cfg, k - 1)?;
            }
            traj.halo.push(traj.ring_values(&cur));
            if snapshot_steps.contains(&k) {
                traj.snapshots.push((k, cur.clone()));
            }
        }
        Ok(traj)
    }

    fn padded_index(&self, p: usize) -> (usize, usize) {
        (self.padded.row0 + p / self.padded.cols, self.padded.col0 + p % self.padded.cols)
    }

    fn ring_values(&self, s: &FlowState) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.ring.len());
        for field in [&s.u, &s.v, &s.h] {
            out.extend(self.ring.iter().map(|&p| {
                let (r, c) = self.padded_index(p);
                field[s.idx(r, c)]
            }));
        }
        out
    }

    pub fn config(&self) -> &SwConfig {
        &self.cfg
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn total_steps(&self) -> usize {
        self.halo.len() - 1
    }

    pub fn snapshot(&self, step: usize) -> Result<&FlowState> {
        self.snapshots
            .iter()
            .find(|(k, _)| *k == step)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::InvalidParameter(format!("no reference snapshot stored at step {step}")))
    }

    /// Window state of the reference at a snapshot step.
    pub fn truth(&self, step: usize) -> Result<DVector<f64>> {
        extract_subdomain(self.snapshot(step)?, &self.window)
    }

    /// Advances the window state `x` from `start` by `n_steps`, with the
    /// reference height inside the window at `start` and the reference ring
    /// imposed at every step.
    pub fn forecast(&self, x: &DVector<f64>, start: usize, n_steps: usize) -> Result<DVector<f64>> {
        if start + n_steps > self.total_steps() {
            return Err(Error::InvalidParameter(format!(
                "forecast to step {} beyond the reference length {}",
                start + n_steps,
                self.total_steps()
            )));
        }
        let base = self.snapshot(start)?;
        let p = self.padded;
        let patch_cfg = SwConfig {
            nx: p.cols,
            ny: p.rows,
            ..self.cfg
        };
        let mut patch = FlowState::still_water(p.cols, p.rows, 1.0);
        patch.time = base.time;
        for r in 0..p.rows {
            for c in 0..p.cols {
                let src = base.idx(p.row0 + r, p.col0 + c);
                let dst = patch.idx(r, c);
                patch.u[dst] = base.u[src];
                patch.v[dst] = base.v[src];
                patch.h[dst] = base.h[src];
            }
        }
        let inner = Window {
            row0: 1,
            col0: 1,
            rows: self.window.rows,
            cols: self.window.cols,
        };
        embed_subdomain(&mut patch, &inner, x)?;
        let m = self.ring.len();
        for k in 0..n_steps {
            patch = step(&patch, &patch_cfg, start + k)?;
            let halo = &self.halo[start + k + 1];
            for (j, &q) in self.ring.iter().enumerate() {
                patch.u[q] = halo[j];
                patch.v[q] = halo[m + j];
                patch.h[q] = halo[2 * m + j];
            }
        }
        extract_subdomain(&patch, &inner)
    }
}

/// Writes `u`, `v`, `h` as CSV: a `nx,ny,time` header record followed by
/// one record per grid row, each prefixed with the field name.
pub fn write_fields_csv<W: Write>(s: &FlowState, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record(["nx", "ny", "time"])?;
    w.write_record([s.nx.to_string(), s.ny.to_string(), format!("{:.16e}", s.time)])?;
    for (name, field) in [("u", &s.u), ("v", &s.v), ("h", &s.h)] {
        for r in 0..s.ny {
            let row = &field[r * s.nx..(r + 1) * s.nx];
            let mut rec = vec![name.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.16e}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_fields_csv<R: Read>(input: R) -> Result<FlowState> {
    let mut rd = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(input);
    let mut records = rd.records();
    let meta = records.next().ok_or_else(|| Error::Parse("missing nx,ny,time record".into()))??;
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
    let parse_usize = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
    if meta.len() != 3 {
        return Err(Error::Parse("header record must have nx, ny, time".into()));
    }
    let (nx, ny, time) = (parse_usize(&meta[0])?, parse_usize(&meta[1])?, parse(&meta[2])?);
    let mut s = FlowState::still_water(nx, ny, 0.0);
    s.time = time;
    for (f, name) in ["u", "v", "h"].iter().enumerate() {
        for r in 0..ny {
            let rec = records
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {name} row {r}")))??;
            if &rec[0] != *name || rec.len() != nx + 1 {
                return Err(Error::Parse(format!("malformed {name} row {r}")));
            }
            let field = match f {
                0 => &mut s.u,
                1 => &mut s.v,
                _ => &mut s.h,
            };
            for c in 0..nx {
                field[r * nx + c] = parse(&rec[c + 1])?;
            }
        }
    }
    Ok(s)
}
