//! Bidirectional LSTM over a sentence sequence.

use crate::losses::sigmoid;
use crate::nn::{add_into, add_outer, matvec, matvec_t, Param, ParamGroup, Parameters};

/// Single-direction LSTM. Gates are stacked `[input, forget, cell, output]`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    pub w: Param,
    pub u: Param,
    pub b: Param,
}

#[derive(Debug, Clone)]
struct Step {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct LstmTrace {
    steps: Vec<Step>,
}

impl Lstm {
    pub fn new(name: &str, input: usize, hidden: usize, seed: u64) -> Self {
        let scale = 1.0 / (hidden.max(1) as f64).sqrt();
        let mut b = Param::zeros(format!("{name}.b"), &[4 * hidden], ParamGroup::Other);
        // forget gate starts open
        b.value[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Lstm {
            input,
            hidden,
            w: Param::uniform(format!("{name}.w"), &[4 * hidden, input], scale, seed, ParamGroup::Other),
            u: Param::uniform(format!("{name}.u"), &[4 * hidden, hidden], scale, seed, ParamGroup::Other),
            b,
        }
    }

    pub fn forward(&self, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, LstmTrace) {
        let h = self.hidden;
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut out = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let mut z = matvec(&self.w.value, 4 * h, x);
            add_into(&mut z, &matvec(&self.u.value, 4 * h, &h_prev));
            add_into(&mut z, &self.b.value);
            let i: Vec<f64> = z[..h].iter().map(|&v| sigmoid(v)).collect();
            let f: Vec<f64> = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
            let g: Vec<f64> = z[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
            let o: Vec<f64> = z[3 * h..].iter().map(|&v| sigmoid(v)).collect();
            let c: Vec<f64> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
            let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
            steps.push(Step {
                x: x.clone(),
                h_prev: std::mem::replace(&mut h_prev, h_new.clone()),
                c_prev: std::mem::replace(&mut c_prev, c),
                i,
                f,
                g,
                o,
                tanh_c,
            });
            out.push(h_new);
        }
        (out, LstmTrace { steps })
    }

    /// Backpropagation through time. `dh` holds the loss gradient w.r.t. each
    /// step's hidden output; returns gradients w.r.t. each step's input.
    pub fn backward(&mut self, trace: &LstmTrace, dh: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dxs = vec![Vec::new(); trace.steps.len()];
        let train = !(self.w.frozen && self.u.frozen && self.b.frozen);
        for (t, s) in trace.steps.iter().enumerate().rev() {
            let mut dz = vec![0.0; 4 * h];
            for k in 0..h {
                let dhk = dh[t][k] + dh_next[k];
                let d_o = dhk * s.tanh_c[k];
                let dc = dhk * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next[k];
                let di = dc * s.g[k];
                let dg = dc * s.i[k];
                let df = dc * s.c_prev[k];
                dc_next[k] = dc * s.f[k];
                dz[k] = di * s.i[k] * (1.0 - s.i[k]);
                dz[h + k] = df * s.f[k] * (1.0 - s.f[k]);
                dz[2 * h + k] = dg * (1.0 - s.g[k] * s.g[k]);
                dz[3 * h + k] = d_o * s.o[k] * (1.0 - s.o[k]);
            }
            if train {
                if !self.w.frozen {
                    add_outer(&mut self.w.grad, &dz, &s.x);
                }
                if !self.u.frozen {
                    add_outer(&mut self.u.grad, &dz, &s.h_prev);
                }
                if !self.b.frozen {
                    add_into(&mut self.b.grad, &dz);
                }
            }
            dxs[t] = matvec_t(&self.w.value, self.input, &dz);
            dh_next = matvec_t(&self.u.value, h, &dz);
        }
        dxs
    }
}

impl Parameters for Lstm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.u);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.u);
        f(&mut self.b);
    }
}

/// Forward and backward LSTMs; each output row is `[h_fwd ; h_bwd]`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

#[derive(Debug, Clone, Default)]
pub struct BiLstmTrace {
    fwd: LstmTrace,
    bwd: LstmTrace,
}

impl BiLstm {
    pub fn new(name: &str, input: usize, hidden: usize, seed: u64) -> Self {
        BiLstm {
            fwd: Lstm::new(&format!("{name}.fwd"), input, hidden, seed),
            bwd: Lstm::new(&format!("{name}.bwd"), input, hidden, seed),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, BiLstmTrace) {
        let (hf, tf) = self.fwd.forward(xs);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let (mut hb, tb) = self.bwd.forward(&rev);
        hb.reverse();
        let out = hf
            .into_iter()
            .zip(hb)
            .map(|(mut a, b)| {
                a.extend(b);
                a
            })
            .collect();
        (out, BiLstmTrace { fwd: tf, bwd: tb })
    }

    pub fn backward(&mut self, trace: &BiLstmTrace, dout: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = self.fwd.hidden;
        let dhf: Vec<Vec<f64>> = dout.iter().map(|d| d[..h].to_vec()).collect();
        let dhb: Vec<Vec<f64>> = dout.iter().rev().map(|d| d[h..].to_vec()).collect();
        let mut dx = self.fwd.backward(&trace.fwd, &dhf);
        let dxb = self.bwd.backward(&trace.bwd, &dhb);
        for (acc, g) in dx.iter_mut().zip(dxb.iter().rev()) {
            add_into(acc, g);
        }
        dx
    }
}

impl Parameters for BiLstm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.fwd.visit(f);
        self.bwd.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fwd.visit_mut(f);
        self.bwd.visit_mut(f);
    }
}
