use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{next_tag, sigmoid, MaskSampler, Matrix, Network, OutputHead};
use crate::error::{Error, Result};

/// One gate: `hidden x (input + hidden)` weights acting on `[x_t ; h_{t-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmGate {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LstmGate {
    fn pre(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        self.weights.matvec_add(z, &mut out);
        out
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        LstmGate {
            weights: Matrix::zeros(rows, cols),
            bias: vec![0.0; rows],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub input_gate: LstmGate,
    pub forget_gate: LstmGate,
    pub output_gate: LstmGate,
    pub candidate: LstmGate,
}

impl LstmCell {
    /// Xavier weights, zero biases except the forget gate which starts at 1.
    pub fn random<R: Rng>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let cols = input_size + hidden_size;
        let mut gate = |bias: f64| LstmGate {
            weights: Matrix::xavier(hidden_size, cols, cols, hidden_size, rng),
            bias: vec![bias; hidden_size],
        };
        LstmCell {
            input_size,
            hidden_size,
            input_gate: gate(0.0),
            forget_gate: gate(1.0),
            output_gate: gate(0.0),
            candidate: gate(0.0),
        }
    }

    fn gates(&self) -> [&LstmGate; 4] {
        [&self.input_gate, &self.forget_gate, &self.output_gate, &self.candidate]
    }

    fn gates_mut(&mut self) -> [&mut LstmGate; 4] {
        [
            &mut self.input_gate,
            &mut self.forget_gate,
            &mut self.output_gate,
            &mut self.candidate,
        ]
    }

    fn well_formed(&self) -> bool {
        let cols = self.input_size + self.hidden_size;
        self.gates().iter().all(|g| {
            g.weights.rows == self.hidden_size
                && g.weights.cols == cols
                && g.weights.data.len() == self.hidden_size * cols
                && g.bias.len() == self.hidden_size
        })
    }
}

/// Hidden and cell state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StepCache {
    z: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
    mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    tag: u64,
    steps: Vec<Vec<StepCache>>,
    head_input: Vec<f64>,
    final_states: Vec<LstmState>,
    pub output: f64,
}

impl LstmCache {
    /// Final `(h, c)` of every layer, bottom first.
    pub fn final_states(&self) -> &[LstmState] {
        &self.final_states
    }
}

/// Stacked LSTM reading a term sequence; the head sees the top layer's last output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackedLstm {
    pub cells: Vec<LstmCell>,
    pub head: OutputHead,
    #[serde(skip, default = "next_tag")]
    tag: u64,
}

impl PartialEq for StackedLstm {
    fn eq(&self, other: &Self) -> bool {
        self.cells == other.cells && self.head == other.head
    }
}

impl StackedLstm {
    pub fn new(cells: Vec<LstmCell>, head: OutputHead) -> Result<Self> {
        let net = StackedLstm {
            cells,
            head,
            tag: next_tag(),
        };
        net.check_shapes()?;
        Ok(net)
    }

    pub fn random<R: Rng>(input: usize, hidden: usize, layers: usize, rng: &mut R) -> Self {
        let cells = (0..layers)
            .map(|l| LstmCell::random(if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        StackedLstm {
            cells,
            head: OutputHead::xavier(hidden, rng),
            tag: next_tag(),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let Some(first) = self.cells.first() else {
            return Err(Error::Shape("stacked LSTM needs at least one layer".into()));
        };
        let mut width = first.input_size;
        for (l, cell) in self.cells.iter().enumerate() {
            if !cell.well_formed() || cell.input_size != width {
                return Err(Error::Shape(format!("LSTM layer {l} is malformed")));
            }
            width = cell.hidden_size;
        }
        if self.head.weights.len() != width {
            return Err(Error::Shape(format!(
                "head has {} weights for hidden size {width}",
                self.head.weights.len()
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.cells[0].input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.cells[0].hidden_size
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    fn check_input(&self, seq: &[Vec<f64>]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let w = self.input_width();
        if let Some(bad) = seq.iter().find(|x| x.len() != w) {
            return Err(Error::Shape(format!(
                "sequence step has {} features, network expects {w}",
                bad.len()
            )));
        }
        Ok(())
    }

    fn run(&self, seq: &[Vec<f64>], mut dropout: Option<&mut MaskSampler>, keep: bool) -> Result<(f64, Option<LstmCache>)> {
        self.check_input(seq)?;
        let top = self.cells.len() - 1;
        let last = seq.len() - 1;
        let mut layer_in: Vec<Vec<f64>> = seq.to_vec();
        let mut all_steps = Vec::with_capacity(self.cells.len());
        let mut final_states = Vec::with_capacity(self.cells.len());
        for (l, cell) in self.cells.iter().enumerate() {
            let hs = cell.hidden_size;
            let mut h = vec![0.0; hs];
            let mut c = vec![0.0; hs];
            let mut outputs = Vec::with_capacity(seq.len());
            let mut steps = Vec::with_capacity(if keep { seq.len() } else { 0 });
            for (t, x) in layer_in.iter().enumerate() {
                let mut z = Vec::with_capacity(cell.input_size + hs);
                z.extend_from_slice(x);
                z.extend_from_slice(&h);
                let i: Vec<f64> = cell.input_gate.pre(&z).into_iter().map(sigmoid).collect();
                let f: Vec<f64> = cell.forget_gate.pre(&z).into_iter().map(sigmoid).collect();
                let o: Vec<f64> = cell.output_gate.pre(&z).into_iter().map(sigmoid).collect();
                let g: Vec<f64> = cell.candidate.pre(&z).into_iter().map(f64::tanh).collect();
                let c_new: Vec<f64> = (0..hs).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
                let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
                let h_new: Vec<f64> = (0..hs).map(|k| o[k] * tanh_c[k]).collect();
                // only the top layer's last output reaches the head
                let mask = match dropout.as_deref_mut() {
                    Some(s) if l < top || t == last => Some(s.sample(hs)),
                    _ => None,
                };
                let out = match &mask {
                    Some(m) => h_new.iter().zip(m).map(|(a, k)| a * k).collect(),
                    None => h_new.clone(),
                };
                outputs.push(out);
                if keep {
                    steps.push(StepCache {
                        z,
                        i,
                        f,
                        o,
                        g,
                        c_prev: std::mem::take(&mut c),
                        tanh_c,
                        mask,
                    });
                }
                h = h_new;
                c = c_new;
            }
            final_states.push(LstmState { h, c });
            all_steps.push(steps);
            layer_in = outputs;
        }
        let head_input = layer_in.pop().unwrap_or_default();
        let output = self.head.apply(&head_input);
        let cache = keep.then_some(LstmCache {
            tag: self.tag,
            steps: all_steps,
            head_input,
            final_states,
            output,
        });
        Ok((output, cache))
    }
}

impl Network for StackedLstm {
    type Input = [Vec<f64>];
    type Cache = LstmCache;

    fn forward(&self, seq: &[Vec<f64>], dropout: Option<&mut MaskSampler>) -> Result<(f64, LstmCache)> {
        let (y, cache) = self.run(seq, dropout, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    fn predict(&self, seq: &[Vec<f64>]) -> Result<f64> {
        Ok(self.run(seq, None, false)?.0)
    }

    fn backward(&self, cache: &LstmCache, d_out: f64, grads: &mut StackedLstm) -> Result<()> {
        if cache.tag != self.tag || cache.steps.len() != self.cells.len() {
            return Err(Error::CacheMismatch);
        }
        if grads.cells.len() != self.cells.len() {
            return Err(Error::Shape("gradient buffer does not match network".into()));
        }
        let len = cache.steps[0].len();
        for (g, h) in grads.head.weights.iter_mut().zip(&cache.head_input) {
            *g += d_out * h;
        }
        grads.head.bias += d_out;

        // gradient w.r.t. each step's (masked) output of the current layer
        let top_h = self.cells.last().map_or(0, |c| c.hidden_size);
        let mut d_outputs: Vec<Vec<f64>> = vec![vec![0.0; top_h]; len];
        d_outputs[len - 1] = self.head.weights.iter().map(|w| w * d_out).collect();

        for l in (0..self.cells.len()).rev() {
            let cell = &self.cells[l];
            let hs = cell.hidden_size;
            let ins = cell.input_size;
            let steps = &cache.steps[l];
            let gcell = &mut grads.cells[l];
            let mut dh_next = vec![0.0; hs];
            let mut dc_next = vec![0.0; hs];
            let mut d_below: Vec<Vec<f64>> = if l > 0 { vec![Vec::new(); len] } else { Vec::new() };
            for t in (0..len).rev() {
                let s = &steps[t];
                let mut dh = dh_next.clone();
                match &s.mask {
                    Some(m) => dh.iter_mut().zip(&d_outputs[t]).zip(m).for_each(|((a, d), k)| *a += d * k),
                    None => dh.iter_mut().zip(&d_outputs[t]).for_each(|(a, d)| *a += d),
                }
                let mut dpre = [vec![0.0; hs], vec![0.0; hs], vec![0.0; hs], vec![0.0; hs]];
                for k in 0..hs {
                    let dc = dc_next[k] + dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
                    let d_o = dh[k] * s.tanh_c[k];
                    dpre[0][k] = dc * s.g[k] * s.i[k] * (1.0 - s.i[k]);
                    dpre[1][k] = dc * s.c_prev[k] * s.f[k] * (1.0 - s.f[k]);
                    dpre[2][k] = d_o * s.o[k] * (1.0 - s.o[k]);
                    dpre[3][k] = dc * s.i[k] * (1.0 - s.g[k] * s.g[k]);
                    dc_next[k] = dc * s.f[k];
                }
                let mut dz = vec![0.0; ins + hs];
                for ((gate, ggate), dp) in cell.gates().into_iter().zip(gcell.gates_mut()).zip(&dpre) {
                    ggate.weights.add_outer(dp, &s.z);
                    ggate.bias.iter_mut().zip(dp).for_each(|(b, d)| *b += d);
                    gate.weights.t_matvec_add(dp, &mut dz);
                }
                dh_next = dz.split_off(ins);
                if l > 0 {
                    d_below[t] = dz;
                }
            }
            d_outputs = d_below;
        }
        Ok(())
    }

    fn cache_output(cache: &LstmCache) -> f64 {
        cache.output
    }

    fn zeros_like(&self) -> Self {
        StackedLstm {
            cells: self
                .cells
                .iter()
                .map(|c| {
                    let cols = c.input_size + c.hidden_size;
                    LstmCell {
                        input_size: c.input_size,
                        hidden_size: c.hidden_size,
                        input_gate: LstmGate::zeros(c.hidden_size, cols),
                        forget_gate: LstmGate::zeros(c.hidden_size, cols),
                        output_gate: LstmGate::zeros(c.hidden_size, cols),
                        candidate: LstmGate::zeros(c.hidden_size, cols),
                    }
                })
                .collect(),
            head: OutputHead {
                weights: vec![0.0; self.head.weights.len()],
                bias: 0.0,
            },
            tag: next_tag(),
        }
    }

    fn blocks(&self) -> Vec<(String, &[f64])> {
        const NAMES: [&str; 4] = ["input", "forget", "output", "candidate"];
        let mut out = Vec::with_capacity(8 * self.cells.len() + 2);
        for (l, cell) in self.cells.iter().enumerate() {
            for (name, gate) in NAMES.iter().zip(cell.gates()) {
                out.push((format!("lstm{l}.{name}.weights"), gate.weights.data.as_slice()));
                out.push((format!("lstm{l}.{name}.bias"), gate.bias.as_slice()));
            }
        }
        out.push(("head.weights".into(), self.head.weights.as_slice()));
        out.push(("head.bias".into(), std::slice::from_ref(&self.head.bias)));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.tag = next_tag();
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(8 * self.cells.len() + 2);
        for cell in &mut self.cells {
            for gate in cell.gates_mut() {
                out.push(gate.weights.data.as_mut_slice());
                out.push(gate.bias.as_mut_slice());
            }
        }
        out.push(self.head.weights.as_mut_slice());
        out.push(std::slice::from_mut(&mut self.head.bias));
        out
    }
}
