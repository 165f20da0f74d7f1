//! Logic-LSTM: a convolutional LSTM whose state is split into a
//! convolution part and a cheaper "logic" part mixed by 1x1 convolutions and
//! multi-window max pooling. Slices are processed twice: the first pass
//! records states, the second starts each step from the recorded state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Binding, Conv, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Padding, Tensor, Var};

pub const CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct LlstmConfig {
    /// Convolution-part channels.
    pub n_c: usize,
    /// Logic-part channels.
    pub n_l: usize,
    /// Channels sharing one pooling window.
    pub m: usize,
    /// Kernel side of the spatial convolutions.
    pub w: usize,
    pub n1: usize,
    /// Input channels per slice.
    pub d_k: usize,
    pub forget_bias: f64,
}

impl LlstmConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.n_c == 0 || c.n_l == 0 || c.m == 0 || c.n1 == 0 || c.d_k == 0 {
            return Err(Error::Config("llstm sizes must be positive".into()));
        }
        if c.n_l % c.m != 0 {
            return Err(Error::Config(format!(
                "llstm.m={} must divide llstm.n_l={} (logic channels are pooled in groups of m)",
                c.m, c.n_l
            )));
        }
        if c.w % 2 == 0 {
            return Err(Error::Config(format!("llstm.w={} must be odd", c.w)));
        }
        if !c.forget_bias.is_finite() {
            return Err(Error::Config("llstm.forget_bias must be finite".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.n_c + self.n_l
    }

    /// Pooling window per group: `2 n1 / 2^i` for `i = 1..=n_l/m`, clipped
    /// to `[1, n1]`.
    pub fn windows(&self) -> Vec<usize> {
        (1..=self.n_l / self.m.max(1))
            .map(|i| {
                let w = if i >= usize::BITS as usize { 0 } else { (2 * self.n1) >> i };
                w.clamp(1, self.n1.max(1))
            })
            .collect()
    }

    /// Window for every logic channel, `m` consecutive channels per group.
    pub fn channel_windows(&self) -> Vec<usize> {
        self.windows()
            .into_iter()
            .flat_map(|w| std::iter::repeat_n(w, self.m))
            .collect()
    }

    /// Weight count of the same cell built from one full `w x w`
    /// convolution over every state and input channel.
    pub fn convlstm_param_count(&self) -> usize {
        let h = self.hidden();
        let c_in = 2 * h + self.d_k;
        c_in * self.w * self.w * 4 * h + 4 * h
    }
}

/// Per-group sliding max: channel `i*m + j` uses `windows[i]`.
pub fn transfer<T: Scalar>(g: &mut Graph<T>, x: Var, m: usize, windows: &[usize]) -> Result<Var> {
    let c = g.shape(x).first().copied().unwrap_or(0);
    if m == 0 || c % m != 0 {
        return Err(Error::invalid(format!("group size {m} does not divide {c} channels")));
    }
    if c / m != windows.len() {
        return Err(Error::shape("transfer", &[c / m], &[windows.len()]));
    }
    let per: Vec<usize> = windows.iter().flat_map(|&w| std::iter::repeat_n(w, m)).collect();
    g.maxpool_channels(x, &per)
}

/// Hidden and cell state on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

/// Hidden and cell state as plain tensors `[n_c + n_l, n1, n1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> RecurrentState<T> {
    pub fn zeros(cfg: &LlstmConfig) -> Self {
        let shape = [cfg.hidden(), cfg.n1, cfg.n1];
        RecurrentState {
            h: Tensor::zeros(shape),
            c: Tensor::zeros(shape),
        }
    }

    pub fn put(&self, g: &mut Graph<T>) -> StateVars {
        StateVars {
            h: g.constant(self.h.clone()),
            c: g.constant(self.c.clone()),
        }
    }

    pub fn read(g: &Graph<T>, s: StateVars) -> Self {
        RecurrentState {
            h: g.value(s.h).clone(),
            c: g.value(s.c).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Llstm {
    pub cfg: LlstmConfig,
    /// `w x w` over conv state and input, with bias.
    pub conv_main: Conv,
    /// `1x1` over logic state into the conv gates, no bias.
    pub logic_mix: Conv,
    /// `w x w` over conv state and input, feeding the pooling.
    pub logic_pre: Conv,
    /// `1x1` over pooled features and logic state, with bias.
    pub logic_out: Conv,
    pub head: Conv,
}

impl Llstm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &LlstmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (nc, nl, w) = (cfg.n_c, cfg.n_l, cfg.w);
        let a_c = 2 * nc + cfg.d_k;
        let cell = Llstm {
            cfg: cfg.clone(),
            conv_main: Conv::new(store, "llstm.conv_main", a_c, 4 * nc, w, 1, Padding::Same, true, rng)?,
            logic_mix: Conv::new(store, "llstm.logic_mix", 2 * nl, 4 * nc, 1, 1, Padding::Same, false, rng)?,
            logic_pre: Conv::new(store, "llstm.logic_pre", a_c, nl, w, 1, Padding::Same, true, rng)?,
            logic_out: Conv::new(store, "llstm.logic_out", 3 * nl, 4 * nl, 1, 1, Padding::Same, true, rng)?,
            head: Conv::new(store, "llstm.head", nc + nl, CLASSES, 1, 1, Padding::Same, true, rng)?,
        };
        let fb = T::lit(cfg.forget_bias);
        let b = store.get_mut(cell.conv_main.bias.expect("has bias"));
        b.data_mut()[nc..2 * nc].iter_mut().for_each(|v| *v = fb);
        let b = store.get_mut(cell.logic_out.bias.expect("has bias"));
        b.data_mut()[nl..2 * nl].iter_mut().for_each(|v| *v = fb);
        Ok(cell)
    }

    /// Gate pre-activations `a1 || a2` with `4 n_c + 4 n_l` channels.
    /// `a_c = c1 || h1 || x`, `a_l = c2 || h2`.
    pub fn logic<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, a_c: Var, a_l: Var) -> Result<Var> {
        let (a1, a2) = self.logic_parts(g, b, a_c, a_l)?;
        g.concat(&[a1, a2])
    }

    fn logic_parts<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, a_c: Var, a_l: Var) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        let want_c = 2 * cfg.n_c + cfg.d_k;
        if g.shape(a_c).first() != Some(&want_c) || g.shape(a_l).first() != Some(&(2 * cfg.n_l)) {
            return Err(Error::shape("llstm logic", g.shape(a_c), g.shape(a_l)));
        }
        let main = self.conv_main.forward(g, b, a_c)?;
        let mix = self.logic_mix.forward(g, b, a_l)?;
        let a1 = g.add(main, mix)?;
        let pre = self.logic_pre.forward(g, b, a_c)?;
        let pooled = transfer(g, pre, cfg.m, &cfg.windows())?;
        let cat = g.concat(&[pooled, a_l])?;
        let a2 = self.logic_out.forward(g, b, cat)?;
        Ok((a1, a2))
    }

    pub fn cell_step<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, state: StateVars, x: Var) -> Result<StateVars> {
        let (nc, nl) = (self.cfg.n_c, self.cfg.n_l);
        let c1 = g.slice(state.c, 0, nc)?;
        let c2 = g.slice(state.c, nc, nl)?;
        let h1 = g.slice(state.h, 0, nc)?;
        let h2 = g.slice(state.h, nc, nl)?;
        let a_c = g.concat(&[c1, h1, x])?;
        let a_l = g.concat(&[c2, h2])?;
        let (a1, a2) = self.logic_parts(g, b, a_c, a_l)?;
        let mut gate = |k: usize| -> Result<Var> {
            let conv = g.slice(a1, k * nc, nc)?;
            let logic = g.slice(a2, k * nl, nl)?;
            g.concat(&[conv, logic])
        };
        let (i, f, cand, o) = (gate(0)?, gate(1)?, gate(2)?, gate(3)?);
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(StateVars { h, c })
    }

    /// Two passes over `xs` (each `[d_k, n1, n1]`); returns per-slice class
    /// logits `[2, n1, n1]`.
    pub fn run_sequence<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.is_empty() {
            return Err(Error::invalid("run_sequence needs at least one slice"));
        }
        let zero = RecurrentState::<T>::zeros(&self.cfg).put(g);
        let mut state = zero;
        let mut recorded = Vec::with_capacity(xs.len());
        for &x in xs {
            state = self.cell_step(g, b, state, x)?;
            recorded.push(state);
        }
        let mut logits = Vec::with_capacity(xs.len());
        for (&x, &seed) in xs.iter().zip(&recorded) {
            let s = self.cell_step(g, b, seed, x)?;
            logits.push(self.head.forward(g, b, s.h)?);
        }
        Ok(logits)
    }

    pub fn num_params<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        [&self.conv_main, &self.logic_mix, &self.logic_pre, &self.logic_out]
            .iter()
            .map(|c| store.get(c.weight).numel() + c.bias.map_or(0, |id| store.get(id).numel()))
            .sum()
    }
}

/// Softmax over the class axis of `[classes, H, W]`.
pub fn class_softmax<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("class_softmax", &s, &[]));
    }
    let flat = g.reshape(logits, &[s[0], s[1] * s[2]])?;
    let rows = g.transpose(flat)?;
    let p = g.softmax_lastdim(rows)?;
    let back = g.transpose(p)?;
    g.reshape(back, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LlstmConfig {
        LlstmConfig { n_c: 4, n_l: 9, m: 3, w: 3, n1: 64, d_k: 16, forget_bias: 1.0 }
    }

    #[test]
    fn windows_halve_from_n1() {
        assert_eq!(cfg().windows(), vec![64, 32, 16]);
        let tiny = LlstmConfig { n1: 4, n_l: 12, m: 2, ..cfg() };
        assert_eq!(tiny.windows(), vec![4, 2, 1, 1, 1, 1]);
    }

    #[test]
    fn indivisible_groups_rejected() {
        let bad = LlstmConfig { n_l: 8, ..cfg() };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("divide"), "{msg}");
    }
}
