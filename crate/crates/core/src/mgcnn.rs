//! Chebyshev multi-graph convolutions and the recurrent diffusion refiner.
//!
//! For each mode the refiner unrolls `T` steps of
//!
//! ```text
//! F_t       = Σ_j coeffs[j, c] · T_j(L̃) A_t          (N × R × C features)
//! (h, c)    = LSTM(flatten(F_t[i]), h, c)             (per node, shared weights)
//! δA_t[i]   = W_out h_i + b_out
//! A_{t+1}   = A_t + δA_t
//! ```
//!
//! and is trained by gradient descent on the joint objective evaluated at the
//! diffused factors. Gradients are derived by hand and back-propagated through
//! the unrolled steps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::factor::{parse_row, parse_word, write_rows, FactorSet};
use crate::graph::{chebyshev_apply, CsrMatrix};
use crate::objective::Objective;

/// Per-mode Chebyshev filter: `(p + 1) × c_out` coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebFilter {
    coeffs: Array2<f64>,
}

impl ChebFilter {
    pub fn new(coeffs: Array2<f64>) -> Result<Self> {
        if coeffs.nrows() == 0 || coeffs.ncols() == 0 {
            return Err(Error::Invalid("filter needs at least one order and one channel".into()));
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite filter coefficient".into()));
        }
        Ok(ChebFilter { coeffs })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.nrows() - 1
    }

    pub fn channels(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn coeffs(&self) -> &Array2<f64> {
        &self.coeffs
    }
}

/// `Ã[:, :, c] = Σ_j coeffs[j, c] T_j(L̃) A`.
pub fn mode_conv(a: ArrayView2<f64>, laplacian: &CsrMatrix, filter: &ChebFilter) -> Result<Array3<f64>> {
    let terms = chebyshev_apply(laplacian, a, filter.degree())?;
    Ok(combine_terms(&terms, filter))
}

fn combine_terms(terms: &[Array2<f64>], filter: &ChebFilter) -> Array3<f64> {
    let (n, r) = terms[0].dim();
    let mut out = Array3::zeros((n, r, filter.channels()));
    for (j, t) in terms.iter().enumerate() {
        for c in 0..filter.channels() {
            let w = filter.coeffs[[j, c]];
            if w != 0.0 {
                out.slice_mut(s![.., .., c]).scaled_add(w, t);
            }
        }
    }
    out
}

/// Two-graph filter `Σ_{j,j'} θ_{jj'} T_j(L̃_r) X T_{j'}(L̃_c)` for a matrix with row and column graphs.
pub fn bilinear_conv(
    x: ArrayView2<f64>,
    row_laplacian: &CsrMatrix,
    col_laplacian: &CsrMatrix,
    theta: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if theta.nrows() == 0 || theta.nrows() != theta.ncols() {
        return Err(Error::Shape(format!("theta must be square (p+1)×(p+1), got {:?}", theta.dim())));
    }
    let p = theta.nrows() - 1;
    if col_laplacian.nrows() != x.ncols() {
        return Err(Error::Shape(format!(
            "column Laplacian has {} nodes, matrix has {} columns",
            col_laplacian.nrows(),
            x.ncols()
        )));
    }
    let row_terms = chebyshev_apply(row_laplacian, x, p)?;
    let mut out = Array2::zeros(x.dim());
    for (j, rt) in row_terms.iter().enumerate() {
        // X T(L̃_c) = (T(L̃_c) Xᵀ)ᵀ because the Laplacian is symmetric
        let col_terms = chebyshev_apply(col_laplacian, rt.t(), p)?;
        for (jp, ct) in col_terms.iter().enumerate() {
            let w = theta[[j, jp]];
            if w != 0.0 {
                out.scaled_add(w, &ct.t());
            }
        }
    }
    Ok(out)
}

/// LSTM cell applied independently to every node row, plus a linear read-out producing `δA`.
///
/// Gate blocks in `w_in`, `w_hid` and `bias` are ordered input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionCell {
    w_in: Array2<f64>,
    w_hid: Array2<f64>,
    bias: Array1<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
}

impl DiffusionCell {
    /// Gate weights uniform on `±1/√h`, forget bias 1, zero read-out (so the cell starts as the identity map).
    pub fn init(input_size: usize, hidden_size: usize, output_size: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let mut uniform = |shape: (usize, usize)| {
            Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
        };
        let w_in = uniform((4 * hidden_size, input_size));
        let w_hid = uniform((4 * hidden_size, hidden_size));
        let mut bias = Array1::zeros(4 * hidden_size);
        bias.slice_mut(s![hidden_size..2 * hidden_size]).fill(1.0);
        DiffusionCell {
            w_in,
            w_hid,
            bias,
            w_out: Array2::zeros((output_size, hidden_size)),
            b_out: Array1::zeros(output_size),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hid.ncols()
    }

    pub fn output_size(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn w_out(&self) -> &Array2<f64> {
        &self.w_out
    }

    pub fn set_readout(&mut self, w_out: Array2<f64>, b_out: Array1<f64>) -> Result<()> {
        if w_out.dim() != self.w_out.dim() || b_out.len() != self.b_out.len() {
            return Err(Error::Shape("read-out shape mismatch".into()));
        }
        self.w_out = w_out;
        self.b_out = b_out;
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        DiffusionCell {
            w_in: Array2::zeros(self.w_in.dim()),
            w_hid: Array2::zeros(self.w_hid.dim()),
            bias: Array1::zeros(self.bias.len()),
            w_out: Array2::zeros(self.w_out.dim()),
            b_out: Array1::zeros(self.b_out.len()),
        }
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden_size();
        let ok = self.w_in.nrows() == 4 * h
            && self.w_hid.dim() == (4 * h, h)
            && self.bias.len() == 4 * h
            && self.w_out.ncols() == h
            && self.b_out.len() == self.w_out.nrows();
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent diffusion cell weight shapes".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinerConfig {
    /// Chebyshev polynomial degree.
    pub degree: usize,
    /// Output channels of each per-mode filter.
    pub channels: usize,
    pub hidden: usize,
    /// Unrolled diffusion steps `T`.
    pub steps: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// One cell shared by all modes instead of one per mode.
    pub shared_cell: bool,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            degree: 4,
            channels: 4,
            hidden: 16,
            steps: 3,
            learning_rate: 1e-3,
            clip_norm: 1.0,
            shared_cell: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MGCNNModel {
    filters: Vec<ChebFilter>,
    cells: Vec<DiffusionCell>,
    shared_cell: bool,
    steps: usize,
    learning_rate: f64,
    clip_norm: f64,
}

impl MGCNNModel {
    /// Random model for `modes` factor matrices of rank `rank`.
    pub fn init(modes: usize, rank: usize, cfg: &RefinerConfig) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(Error::Invalid("diffusion needs at least one step".into()));
        }
        if modes == 0 || rank == 0 || cfg.channels == 0 || cfg.hidden == 0 {
            return Err(Error::Invalid("modes, rank, channels and hidden size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // identity on channel 0, small noise elsewhere
        let filters = (0..modes)
            .map(|_| {
                let mut c = Array2::from_shape_simple_fn((cfg.degree + 1, cfg.channels), || {
                    rng.random_range(-0.1..0.1)
                });
                c[[0, 0]] += 1.0;
                ChebFilter::new(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_cells = if cfg.shared_cell { 1 } else { modes };
        let cells = (0..n_cells)
            .map(|_| DiffusionCell::init(rank * cfg.channels, cfg.hidden, rank, &mut rng))
            .collect();
        Self::from_parts(filters, cells, cfg.shared_cell, cfg.steps, cfg.learning_rate, cfg.clip_norm)
    }

    pub fn from_parts(
        filters: Vec<ChebFilter>,
        cells: Vec<DiffusionCell>,
        shared_cell: bool,
        steps: usize,
        learning_rate: f64,
        clip_norm: f64,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("diffusion needs at least one step".into()));
        }
        let want_cells = if shared_cell { 1 } else { filters.len() };
        if cells.len() != want_cells || filters.is_empty() {
            return Err(Error::Shape(format!(
                "{} filters and {} cells (shared = {shared_cell})",
                filters.len(),
                cells.len()
            )));
        }
        for (m, f) in filters.iter().enumerate() {
            let cell = &cells[if shared_cell { 0 } else { m }];
            cell.check()?;
            if cell.input_size() != cell.output_size() * f.channels() {
                return Err(Error::Shape(format!(
                    "mode {m}: cell input {} != rank {} × channels {}",
                    cell.input_size(),
                    cell.output_size(),
                    f.channels()
                )));
            }
        }
        if !(learning_rate.is_finite() && learning_rate > 0.0 && clip_norm > 0.0) {
            return Err(Error::Invalid("learning rate and clip norm must be positive".into()));
        }
        Ok(MGCNNModel {
            filters,
            cells,
            shared_cell,
            steps,
            learning_rate,
            clip_norm,
        })
    }

    pub fn modes(&self) -> usize {
        self.filters.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn shared_cell(&self) -> bool {
        self.shared_cell
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn clip_norm(&self) -> f64 {
        self.clip_norm
    }

    pub fn filter(&self, mode: usize) -> &ChebFilter {
        &self.filters[mode]
    }

    pub fn cell(&self, mode: usize) -> &DiffusionCell {
        &self.cells[if self.shared_cell { 0 } else { mode }]
    }

    pub fn cell_mut(&mut self, mode: usize) -> &mut DiffusionCell {
        let i = if self.shared_cell { 0 } else { mode };
        &mut self.cells[i]
    }

    fn cell_index(&self, mode: usize) -> usize {
        if self.shared_cell {
            0
        } else {
            mode
        }
    }

    fn zeros_like(&self) -> Self {
        MGCNNModel {
            filters: self
                .filters
                .iter()
                .map(|f| ChebFilter {
                    coeffs: Array2::zeros(f.coeffs.dim()),
                })
                .collect(),
            cells: self.cells.iter().map(DiffusionCell::zeros_like).collect(),
            ..*self
        }
    }

    fn blocks(&self) -> Vec<(String, ArrayView2<'_, f64>)> {
        let mut out = Vec::new();
        for (m, f) in self.filters.iter().enumerate() {
            out.push((format!("filter.{m}"), f.coeffs.view()));
        }
        for (c, cell) in self.cells.iter().enumerate() {
            out.push((format!("cell.{c}.w_in"), cell.w_in.view()));
            out.push((format!("cell.{c}.w_hid"), cell.w_hid.view()));
            out.push((format!("cell.{c}.bias"), cell.bias.view().insert_axis(Axis(0))));
            out.push((format!("cell.{c}.w_out"), cell.w_out.view()));
            out.push((format!("cell.{c}.b_out"), cell.b_out.view().insert_axis(Axis(0))));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for f in &mut self.filters {
            out.push(f.coeffs.as_slice_mut().expect("standard layout"));
        }
        for cell in &mut self.cells {
            out.push(cell.w_in.as_slice_mut().expect("standard layout"));
            out.push(cell.w_hid.as_slice_mut().expect("standard layout"));
            out.push(cell.bias.as_slice_mut().expect("standard layout"));
            out.push(cell.w_out.as_slice_mut().expect("standard layout"));
            out.push(cell.b_out.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// All trainable parameters, filters first then cells, each block row-major.
    pub fn params(&self) -> Vec<f64> {
        self.blocks().into_iter().flat_map(|(_, b)| b.iter().copied().collect::<Vec<_>>()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for block in self.blocks_mut() {
            block.copy_from_slice(&params[off..off + block.len()]);
            off += block.len();
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "#mgcnn modes={} steps={} shared={} lr={:?} clip={:?}",
            self.modes(),
            self.steps,
            self.shared_cell,
            self.learning_rate,
            self.clip_norm
        );
        for (name, b) in self.blocks() {
            let _ = writeln!(out, "#param {name} {} {}", b.nrows(), b.ncols());
            write_rows(&mut out, b);
        }
        out
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_checkpoint(&text, path)
    }

    pub fn parse_checkpoint(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (ln, header) = lines.next().ok_or_else(|| Error::parse(path, 0, "empty checkpoint"))?;
        let mut words = header.split_whitespace();
        if words.next() != Some("#mgcnn") {
            return Err(Error::parse(path, ln + 1, "expected `#mgcnn` header"));
        }
        let (mut modes, mut steps, mut shared, mut lr, mut clip) = (None, None, None, None, None);
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::parse(path, ln + 1, format!("bad header field `{w}`")))?;
            match k {
                "modes" => modes = Some(parse_word::<usize>(v, path, ln)?),
                "steps" => steps = Some(parse_word::<usize>(v, path, ln)?),
                "shared" => shared = Some(parse_word::<bool>(v, path, ln)?),
                "lr" => lr = Some(parse_word::<f64>(v, path, ln)?),
                "clip" => clip = Some(parse_word::<f64>(v, path, ln)?),
                _ => return Err(Error::parse(path, ln + 1, format!("unknown header field `{k}`"))),
            }
        }
        let missing = || Error::parse(path, ln + 1, "incomplete `#mgcnn` header");
        let (modes, steps, shared) = (modes.ok_or_else(missing)?, steps.ok_or_else(missing)?, shared.ok_or_else(missing)?);
        let (lr, clip) = (lr.ok_or_else(missing)?, clip.ok_or_else(missing)?);

        let mut next_block = |name: &str| -> Result<Array2<f64>> {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("missing block {name}")))?;
            let w: Vec<&str> = line.split_whitespace().collect();
            if w.len() != 4 || w[0] != "#param" || w[1] != name {
                return Err(Error::parse(path, ln + 1, format!("expected `#param {name} rows cols`")));
            }
            let rows: usize = parse_word(w[2], path, ln)?;
            let cols: usize = parse_word(w[3], path, ln)?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, line) = lines
                    .next()
                    .ok_or_else(|| Error::parse(path, 0, format!("block {name} is truncated")))?;
                let row = parse_row(line, path, ln)?;
                if row.len() != cols {
                    return Err(Error::parse(path, ln + 1, format!("expected {cols} columns")));
                }
                data.extend(row);
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
        };
        let mut filters = Vec::with_capacity(modes);
        for m in 0..modes {
            filters.push(ChebFilter::new(next_block(&format!("filter.{m}"))?)?);
        }
        let n_cells = if shared { 1 } else { modes };
        let mut cells = Vec::with_capacity(n_cells);
        for c in 0..n_cells {
            let w_in = next_block(&format!("cell.{c}.w_in"))?;
            let w_hid = next_block(&format!("cell.{c}.w_hid"))?;
            let bias = next_block(&format!("cell.{c}.bias"))?.remove_axis(Axis(0));
            let w_out = next_block(&format!("cell.{c}.w_out"))?;
            let b_out = next_block(&format!("cell.{c}.b_out"))?.remove_axis(Axis(0));
            cells.push(DiffusionCell {
                w_in,
                w_hid,
                bias,
                w_out,
                b_out,
            });
        }
        Self::from_parts(filters, cells, shared, steps, lr, clip)
    }
}

/// Cached activations of one unrolled step.
#[derive(Debug, Clone)]
pub struct DiffusionStep {
    /// Factor matrix entering the step.
    pub a: Array2<f64>,
    terms: Vec<Array2<f64>>,
    /// Flattened per-node filter responses, `N × (R·C)`.
    features: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Gate activations `[i, f, o, g]`, each `N × h`.
    gates: [Array2<f64>; 4],
    c_new: Array2<f64>,
    h_new: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<DiffusionStep>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn flatten_features(f: &Array3<f64>) -> Array2<f64> {
    let (n, r, c) = f.dim();
    f.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, r * c))
        .expect("contiguous")
}

/// Runs the unrolled diffusion of one factor matrix; returns `A_T` and the cached steps.
pub fn diffuse(
    a0: ArrayView2<f64>,
    laplacian: &CsrMatrix,
    model: &MGCNNModel,
    mode: usize,
) -> Result<(Array2<f64>, Trajectory)> {
    if mode >= model.modes() {
        return Err(Error::Index(format!("mode {mode} >= model modes {}", model.modes())));
    }
    let filter = model.filter(mode);
    let cell = model.cell(mode);
    let (n, r) = a0.dim();
    if cell.output_size() != r {
        return Err(Error::Shape(format!("cell emits {} columns, factor has {r}", cell.output_size())));
    }
    if laplacian.nrows() != n {
        return Err(Error::Shape(format!("Laplacian has {} nodes, factor has {n} rows", laplacian.nrows())));
    }
    let hsz = cell.hidden_size();
    let mut a = a0.to_owned();
    let mut h = Array2::<f64>::zeros((n, hsz));
    let mut c = Array2::<f64>::zeros((n, hsz));
    let mut steps = Vec::with_capacity(model.steps());
    for t in 0..model.steps() {
        let terms = chebyshev_apply(laplacian, a.view(), filter.degree())?;
        let features = flatten_features(&combine_terms(&terms, filter));
        let mut z = features.dot(&cell.w_in.t());
        z += &h.dot(&cell.w_hid.t());
        z += &cell.bias;
        let gi = z.slice(s![.., 0..hsz]).mapv(sigmoid);
        let gf = z.slice(s![.., hsz..2 * hsz]).mapv(sigmoid);
        let go = z.slice(s![.., 2 * hsz..3 * hsz]).mapv(sigmoid);
        let gg = z.slice(s![.., 3 * hsz..4 * hsz]).mapv(f64::tanh);
        let c_new = &gf * &c + &gi * &gg;
        let h_new = &go * &c_new.mapv(f64::tanh);
        let mut delta = h_new.dot(&cell.w_out.t());
        delta += &cell.b_out;
        let a_next = &a + &delta;
        if a_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite factor after diffusion step {t} of mode {mode}")));
        }
        steps.push(DiffusionStep {
            a: std::mem::replace(&mut a, a_next),
            terms,
            features,
            h_prev: std::mem::replace(&mut h, h_new.clone()),
            c_prev: std::mem::replace(&mut c, c_new.clone()),
            gates: [gi, gf, go, gg],
            c_new,
            h_new,
        });
    }
    Ok((a, Trajectory { steps }))
}

/// `Σ_j T_j(L̃) M_j` by Clenshaw's recurrence.
fn chebyshev_adjoint(laplacian: &CsrMatrix, ms: &[Array2<f64>]) -> Array2<f64> {
    let shifted = |y: &Array2<f64>| -> Array2<f64> {
        let mut out = laplacian.dot_dense(&y.view()).expect("shape checked");
        out -= y;
        out
    };
    let p = ms.len() - 1;
    if p == 0 {
        return ms[0].clone();
    }
    let zeros = Array2::<f64>::zeros(ms[0].dim());
    let (mut b1, mut b2) = (zeros.clone(), zeros);
    for m in ms[1..].iter().rev() {
        let mut b0 = shifted(&b1);
        b0 *= 2.0;
        b0 -= &b2;
        b0 += m;
        b2 = std::mem::replace(&mut b1, b0);
    }
    let mut out = shifted(&b1);
    out -= &b2;
    out += &ms[0];
    out
}

/// Back-propagates `d_final = ∂loss/∂A_T` through one mode's trajectory, accumulating
/// parameter gradients into `grad` and returning `∂loss/∂A_0`.
fn backprop_mode(
    laplacian: &CsrMatrix,
    model: &MGCNNModel,
    grad: &mut MGCNNModel,
    mode: usize,
    traj: &Trajectory,
    d_final: Array2<f64>,
) -> Array2<f64> {
    let ci = model.cell_index(mode);
    let cell = &model.cells[ci];
    let filter = &model.filters[mode];
    let hsz = cell.hidden_size();
    let (n, r) = d_final.dim();
    let chans = filter.channels();
    let mut d_a = d_final;
    let mut dh_next = Array2::<f64>::zeros((n, hsz));
    let mut dc_next = Array2::<f64>::zeros((n, hsz));
    for st in traj.steps.iter().rev() {
        let [gi, gf, go, gg] = &st.gates;
        let g_cell = &mut grad.cells[ci];
        // read-out
        g_cell.w_out += &d_a.t().dot(&st.h_new);
        g_cell.b_out += &d_a.sum_axis(Axis(0));
        let dh = d_a.dot(&cell.w_out) + &dh_next;
        // h = o ⊙ tanh(c)
        let tc = st.c_new.mapv(f64::tanh);
        let d_o = &dh * &tc;
        let mut dc = &dh * go;
        Zip::from(&mut dc).and(&tc).for_each(|d, &t| *d *= 1.0 - t * t);
        dc += &dc_next;
        let mut dz = Array2::<f64>::zeros((n, 4 * hsz));
        Zip::from(dz.slice_mut(s![.., 0..hsz]))
            .and(&dc)
            .and(gg)
            .and(gi)
            .for_each(|z, &d, &g, &i| *z = d * g * i * (1.0 - i));
        Zip::from(dz.slice_mut(s![.., hsz..2 * hsz]))
            .and(&dc)
            .and(&st.c_prev)
            .and(gf)
            .for_each(|z, &d, &cp, &f| *z = d * cp * f * (1.0 - f));
        Zip::from(dz.slice_mut(s![.., 2 * hsz..3 * hsz]))
            .and(&d_o)
            .and(go)
            .for_each(|z, &d, &o| *z = d * o * (1.0 - o));
        Zip::from(dz.slice_mut(s![.., 3 * hsz..4 * hsz]))
            .and(&dc)
            .and(gi)
            .and(gg)
            .for_each(|z, &d, &i, &g| *z = d * i * (1.0 - g * g));
        dc_next = &dc * gf;
        g_cell.w_in += &dz.t().dot(&st.features);
        g_cell.w_hid += &dz.t().dot(&st.h_prev);
        g_cell.bias += &dz.sum_axis(Axis(0));
        dh_next = dz.dot(&cell.w_hid);
        let d_feat = dz
            .dot(&cell.w_in)
            .into_shape_with_order((n, r, chans))
            .expect("feature layout");
        // features[i, r, c] = Σ_j coeffs[j, c] terms_j[i, r]
        let g_filter = &mut grad.filters[mode].coeffs;
        let mut d_terms = Vec::with_capacity(st.terms.len());
        for (j, t) in st.terms.iter().enumerate() {
            let mut dt = Array2::<f64>::zeros((n, r));
            for c in 0..chans {
                let dfc = d_feat.slice(s![.., .., c]);
                g_filter[[j, c]] += (&dfc * t).sum();
                dt.scaled_add(filter.coeffs[[j, c]], &dfc);
            }
            d_terms.push(dt);
        }
        d_a += &chebyshev_adjoint(laplacian, &d_terms);
    }
    d_a
}

/// Diffuses every factor of `fs` through the model.
pub fn diffuse_all(
    objective: &Objective<'_>,
    fs: &FactorSet,
    model: &MGCNNModel,
) -> Result<(FactorSet, Vec<Trajectory>)> {
    check_model(objective, fs, model)?;
    let mut out = Vec::with_capacity(fs.order());
    let mut trajs = Vec::with_capacity(fs.order());
    for m in 0..fs.order() {
        let (a, t) = diffuse(fs.factor(m).view(), objective.graphs()[m].laplacian(), model, m)?;
        out.push(a);
        trajs.push(t);
    }
    Ok((FactorSet::with_seed(out, fs.seed())?, trajs))
}

fn check_model(objective: &Objective<'_>, fs: &FactorSet, model: &MGCNNModel) -> Result<()> {
    if model.modes() != fs.order() || objective.order() != fs.order() {
        return Err(Error::Shape(format!(
            "model has {} modes, factors {} and objective {}",
            model.modes(),
            fs.order(),
            objective.order()
        )));
    }
    Ok(())
}

/// Joint loss at the diffused factors and its gradient with respect to every model parameter
/// (flattened in [`MGCNNModel::params`] order).
pub fn refiner_loss_and_grad(
    objective: &Objective<'_>,
    fs: &FactorSet,
    model: &MGCNNModel,
) -> Result<(f64, Vec<f64>)> {
    let (diffused, trajs) = diffuse_all(objective, fs, model)?;
    let loss = objective.total_loss(&diffused)?.total;
    let mut grad = model.zeros_like();
    for (m, traj) in trajs.iter().enumerate() {
        let d_final = objective.grad_mode(&diffused, m)?;
        backprop_mode(objective.graphs()[m].laplacian(), model, &mut grad, m, traj, d_final);
    }
    Ok((loss, grad.params()))
}

/// Joint loss at the diffused factors.
pub fn refiner_loss(objective: &Objective<'_>, fs: &FactorSet, model: &MGCNNModel) -> Result<f64> {
    let (diffused, _) = diffuse_all(objective, fs, model)?;
    Ok(objective.total_loss(&diffused)?.total)
}

#[derive(Debug, Clone)]
pub struct RefineReport {
    /// Loss at the start of each epoch, then the loss after the last update.
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

/// Gradient descent with global-norm clipping on the refiner parameters, factors held fixed.
pub fn train_refiner(
    objective: &Objective<'_>,
    fs: &FactorSet,
    model: &MGCNNModel,
    epochs: usize,
) -> Result<(MGCNNModel, RefineReport)> {
    check_model(objective, fs, model)?;
    let mut model = model.clone();
    let mut report = RefineReport {
        losses: Vec::with_capacity(epochs + 1),
        grad_norms: Vec::with_capacity(epochs),
    };
    if epochs == 0 {
        return Ok((model, report));
    }
    let mut params = model.params();
    let mut initial = None;
    for epoch in 0..epochs {
        let (loss, mut grad) = refiner_loss_and_grad(objective, fs, &model)?;
        let initial = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 1e6 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Numerical(format!(
                "refiner diverged at epoch {epoch}: loss {loss:e} vs initial {initial:e}"
            )));
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > model.clip_norm {
            let scale = model.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
        report.losses.push(loss);
        report.grad_norms.push(norm);
        log::debug!("refiner epoch {epoch}: loss {loss:.6e}, grad norm {norm:.3e}");
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= model.learning_rate * g;
        }
        model.set_params(&params)?;
    }
    report.losses.push(refiner_loss(objective, fs, &model)?);
    Ok((model, report))
}
