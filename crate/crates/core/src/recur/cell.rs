use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Array, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

/// Parameters of one GRU or LSTM cell.
///
/// GRU columns are `[update | reset | candidate]`; the recurrent weights for
/// the candidate are kept separately because they act on `reset ∘ h`.
/// LSTM columns are `[input | forget | output | cell]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnCell {
    pub kind: CellKind,
    pub input_dim: usize,
    pub state_dim: usize,
    pub w_input: ParamId,
    pub w_state: ParamId,
    pub w_candidate: Option<ParamId>,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl RnnCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: CellKind,
        input_dim: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || state_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "cell dims must be positive (input {input_dim}, state {state_dim})"
            )));
        }
        let h = state_dim;
        let g = kind.gates();
        let w_input = store.add_scaled_normal(format!("{prefix}/w_input"), vec![input_dim, g * h], input_dim, rng);
        let (w_state, w_candidate) = match kind {
            CellKind::Gru => (
                store.add_scaled_normal(format!("{prefix}/w_state"), vec![h, 2 * h], h, rng),
                Some(store.add_scaled_normal(format!("{prefix}/w_candidate"), vec![h, h], h, rng)),
            ),
            CellKind::Lstm => (
                store.add_scaled_normal(format!("{prefix}/w_state"), vec![h, 4 * h], h, rng),
                None,
            ),
        };
        let bias = store.add_zeros(format!("{prefix}/bias"), vec![g * h]);
        Ok(Self {
            kind,
            input_dim,
            state_dim,
            w_input,
            w_state,
            w_candidate,
            bias,
        })
    }

    pub fn zero_state(&self, g: &mut Graph) -> CellState {
        let h = g.constant(Array::zeros(vec![1, self.state_dim]));
        let c = match self.kind {
            CellKind::Gru => None,
            CellKind::Lstm => Some(g.constant(Array::zeros(vec![1, self.state_dim]))),
        };
        CellState { h, c }
    }

    /// Input projection `x·W + b` for every row of `x: [T × D]`.
    pub fn project_inputs(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w_input);
        let b = g.param(self.bias);
        let xp = g.matmul(x, w);
        g.add_row(xp, b)
    }

    /// One recurrence step from an already projected input row `[1 × gates·H]`.
    pub fn step_projected(&self, g: &mut Graph, xp: Var, state: CellState) -> CellState {
        let hd = self.state_dim;
        match self.kind {
            CellKind::Gru => {
                let u = g.param(self.w_state);
                let uc = g.param(self.w_candidate.expect("GRU has candidate weights"));
                let hu = g.matmul(state.h, u);
                let x_zr = g.slice_cols(xp, 0, 2 * hd);
                let zr = g.add(x_zr, hu);
                let zr = g.sigmoid(zr);
                let z = g.slice_cols(zr, 0, hd);
                let r = g.slice_cols(zr, hd, 2 * hd);
                let rh = g.mul(r, state.h);
                let rhu = g.matmul(rh, uc);
                let x_c = g.slice_cols(xp, 2 * hd, 3 * hd);
                let cand = g.add(x_c, rhu);
                let cand = g.tanh(cand);
                let keep = g.one_minus(z);
                let old = g.mul(keep, state.h);
                let new = g.mul(z, cand);
                CellState {
                    h: g.add(old, new),
                    c: None,
                }
            }
            CellKind::Lstm => {
                let u = g.param(self.w_state);
                let hu = g.matmul(state.h, u);
                let pre = g.add(xp, hu);
                let ifo = g.slice_cols(pre, 0, 3 * hd);
                let ifo = g.sigmoid(ifo);
                let i = g.slice_cols(ifo, 0, hd);
                let f = g.slice_cols(ifo, hd, 2 * hd);
                let o = g.slice_cols(ifo, 2 * hd, 3 * hd);
                let cand = g.slice_cols(pre, 3 * hd, 4 * hd);
                let cand = g.tanh(cand);
                let c_prev = state.c.expect("LSTM state carries a cell");
                let fc = g.mul(f, c_prev);
                let ig = g.mul(i, cand);
                let c = g.add(fc, ig);
                let tc = g.tanh(c);
                CellState {
                    h: g.mul(o, tc),
                    c: Some(c),
                }
            }
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: CellState) -> CellState {
        let xp = self.project_inputs(g, x);
        self.step_projected(g, xp, state)
    }

    /// Runs the cell over every row of `xp` (projected inputs), forwards or
    /// backwards, returning the hidden state after each position in position
    /// order.
    pub fn run(&self, g: &mut Graph, xp: Var, reverse: bool) -> Vec<Var> {
        let t = g.value(xp).rows();
        let mut state = self.zero_state(g);
        let mut outs = vec![None; t];
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..t).rev()) } else { Box::new(0..t) };
        for pos in order {
            let row = g.slice_rows(xp, pos, pos + 1);
            state = self.step_projected(g, row, state);
            outs[pos] = Some(state.h);
        }
        outs.into_iter().map(|v| v.expect("every position visited")).collect()
    }

    /// Final state after running forwards over `xp`.
    pub fn run_final(&self, g: &mut Graph, xp: Var) -> Var {
        let t = g.value(xp).rows();
        let mut state = self.zero_state(g);
        for pos in 0..t {
            let row = g.slice_rows(xp, pos, pos + 1);
            state = self.step_projected(g, row, state);
        }
        state.h
    }

    fn check(&self, op: &'static str, x: &Array, h: &Array) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::shape(op, format!("input of {}", self.input_dim), format!("{:?}", x.shape())));
        }
        if h.len() != self.state_dim {
            return Err(Error::shape(op, format!("state of {}", self.state_dim), format!("{:?}", h.shape())));
        }
        Ok(())
    }
}

fn as_row(a: &Array) -> Array {
    Array::row_vector(a.data().to_vec())
}

/// One GRU step on plain arrays.
pub fn gru_step(x: &Array, h: &Array, cell: &RnnCell, store: &ParamStore) -> Result<Array> {
    if cell.kind != CellKind::Gru {
        return Err(Error::InvalidArgument("gru_step on a non-GRU cell".into()));
    }
    cell.check("gru_step", x, h)?;
    let mut g = Graph::new(store);
    let xv = g.constant(as_row(x));
    let hv = g.constant(as_row(h));
    let out = cell.step(&mut g, xv, CellState { h: hv, c: None });
    Ok(g.value(out.h).clone())
}

/// One LSTM step on plain arrays, returning `(h', c')`.
pub fn lstm_step(x: &Array, h: &Array, c: &Array, cell: &RnnCell, store: &ParamStore) -> Result<(Array, Array)> {
    if cell.kind != CellKind::Lstm {
        return Err(Error::InvalidArgument("lstm_step on a non-LSTM cell".into()));
    }
    cell.check("lstm_step", x, h)?;
    if c.len() != cell.state_dim {
        return Err(Error::shape("lstm_step", format!("cell of {}", cell.state_dim), format!("{:?}", c.shape())));
    }
    let mut g = Graph::new(store);
    let xv = g.constant(as_row(x));
    let hv = g.constant(as_row(h));
    let cv = g.constant(as_row(c));
    let out = cell.step(&mut g, xv, CellState { h: hv, c: Some(cv) });
    let c_new = out.c.expect("LSTM step returns a cell");
    Ok((g.value(out.h).clone(), g.value(c_new).clone()))
}
