//! Parameter storage and the forward context, plus the small layers every
//! network module is built from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, NormMode, Precision, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub value: Option<Tensor>,
}

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics), in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    precision: Precision,
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            precision,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Copy with every tensor re-tagged (and rounded) to `precision`.
    pub fn to_precision(&self, precision: Precision) -> ParamStore {
        ParamStore {
            precision,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.with_precision(precision),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.as_ref().map(|v| v.with_precision(precision)),
                })
                .collect(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: value.with_precision(self.precision),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Option<Tensor>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value: value.map(|v| v.with_precision(self.precision)),
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{}: {:?} vs {:?}", slot.name, slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value.with_precision(self.precision);
        Ok(())
    }

    pub fn buffer(&self, id: BufferId) -> Option<&Tensor> {
        self.buffers[id.0].value.as_ref()
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Option<Tensor>) {
        self.buffers[id.0].value = value.map(|v| v.with_precision(self.precision));
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffers[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|b| b.name == name).map(BufferId)
    }

    /// Folds train-mode batch statistics into the running averages:
    /// `running ← (1 − m)·running + m·batch`; an empty buffer takes the batch
    /// statistics directly.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let shape = vec![batch.len()];
                let next = match self.buffer(id) {
                    Some(old) => old
                        .data()
                        .iter()
                        .zip(batch)
                        .map(|(o, b)| (1.0 - u.momentum) * o + u.momentum * b)
                        .collect(),
                    None => batch.clone(),
                };
                let t = Tensor::from_raw(shape, next, self.precision);
                self.buffers[id.0].value = Some(t);
            }
        }
    }
}

/// Pending running-statistics update from one train-mode batch norm call.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub momentum: f64,
    pub stats: BatchNormStats,
}

/// Counts of composite blocks executed during one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub swin_blocks: usize,
    pub shifted_blocks: usize,
    pub patch_merges: usize,
    pub res2_blocks: usize,
    pub fu_blocks: usize,
    pub hor_blocks: usize,
    pub reduce_passes: usize,
}

/// One forward pass over read-only parameters. Statistics updates and block
/// counts are collected on the way.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    mode: Mode,
    leaves: Vec<Option<Var>>,
    grad: bool,
    updates: Vec<StatUpdate>,
    pub trace: Trace,
}

/// Gradients indexed by parameter.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// L2 norm over every parameter whose name starts with `prefix`.
    pub fn norm_with_prefix(&self, store: &ParamStore, prefix: &str) -> f64 {
        store
            .ids()
            .filter(|&id| store.name(id).starts_with(prefix))
            .filter_map(|id| self.get(id))
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Forward {
            tape,
            store,
            mode,
            leaves: vec![None; store.len()],
            grad: true,
            updates: Vec::new(),
            trace: Trace::default(),
        }
    }

    /// Like [`Forward::new`] but parameters enter the tape as constants, so
    /// nothing is kept for a backward pass.
    pub fn new_inference(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Forward {
            grad: false,
            ..Forward::new(tape, store, mode)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn precision(&self) -> Precision {
        self.store.precision()
    }

    /// Leaf for `id`, created on first use and shared by later consumers.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.grad);
        self.leaves[id.0] = Some(v);
        v
    }

    /// Routes parameter `id` to an existing variable (used to differentiate
    /// with respect to a single parameter).
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.leaves[id.0] = Some(v);
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t.with_precision(self.store.precision()))
    }

    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads> {
        let g = self.tape.backward(loss)?;
        let grads = self.leaves.iter().map(|l| l.and_then(|v| g.get(v).cloned())).collect();
        Ok(ParamGrads { grads })
    }

    pub fn updates(&self) -> &[StatUpdate] {
        &self.updates
    }

    pub fn into_updates(self) -> (Vec<StatUpdate>, Trace) {
        (self.updates, self.trace)
    }
}

/// Seeded parameter factory.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn p(&self) -> Precision {
        self.store.precision()
    }

    pub fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.p(), &mut self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: String, shape: Vec<usize>, v: f64) -> ParamId {
        let t = Tensor::full(shape, v, self.p());
        self.store.add(name, t)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            weight: init.normal(format!("{name}.weight"), vec![in_dim, out_dim], std),
            bias: init.constant(format!("{name}.bias"), vec![out_dim], 0.0),
            in_dim,
            out_dim,
        }
    }

    /// `x · W + b` on the trailing axis.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        let y = f.tape.matmul(x, w)?;
        f.tape.add_broadcast(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin / groups * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv2d {
            weight: init.normal(format!("{name}.weight"), vec![cout, cin / groups, k, k], std),
            bias: bias.then(|| init.constant(format!("{name}.bias"), vec![cout], 0.0)),
            stride,
            pad: k / 2,
            groups,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.tape.conv2d_grouped(x, w, b, self.stride, self.pad, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: init.constant(format!("{name}.gamma"), vec![channels], 1.0),
            beta: init.constant(format!("{name}.beta"), vec![channels], 0.0),
            running_mean: init.store.add_buffer(format!("{name}.running_mean"), None),
            running_var: init.store.add_buffer(format!("{name}.running_var"), None),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        match f.mode {
            Mode::Train => {
                let (y, stats) = f.tape.batch_norm(x, g, b, NormMode::Train, self.eps)?;
                if let Some(stats) = stats {
                    f.updates.push(StatUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        momentum: self.momentum,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = f.store;
                let (Some(m), Some(v)) = (store.buffer(self.running_mean), store.buffer(self.running_var)) else {
                    return Err(Error::MissingRunningStats(self.name.clone()));
                };
                let mode = NormMode::Eval {
                    mean: m.data(),
                    var: v.data(),
                };
                Ok(f.tape.batch_norm(x, g, b, mode, self.eps)?.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: init.constant(format!("{name}.gamma"), vec![dim], 1.0),
            beta: init.constant(format!("{name}.beta"), vec![dim], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        f.tape.layer_norm(x, g, b, self.eps)
    }

    /// Normalises `[N, C, H, W]` over channels at each spatial site.
    pub fn forward_channels(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let nhwc = f.tape.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward(f, nhwc)?;
        f.tape.permute(y, &[0, 3, 1, 2])
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct Cbr {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Cbr {
    /// Same-padded `k×k` CBR (no conv bias; the batch norm supplies the shift).
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Cbr {
            conv: Conv2d::new(init, &format!("{name}.conv"), cin, cout, k, stride, 1, false),
            bn: BatchNorm2d::new(init, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        f.tape.relu(y)
    }
}

/// Sets every parameter whose name starts with `prefix` to zero (test helper
/// for residual-identity properties).
pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        let z = Tensor::zeros(store.get(id).shape().to_vec(), store.precision());
        store.set(id, z).expect("same shape");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cbr_is_nonnegative_and_preserves_resolution() {
        let mut store = ParamStore::new(Precision::F64);
        let mut init = Init::new(&mut store, 3);
        let cbr1 = Cbr::new(&mut init, "a", 3, 5, 3, 1);
        let cbr2 = Cbr::new(&mut init, "b", 3, 5, 3, 2);
        let x = Tensor::randn(vec![2, 3, 16, 16], 1.0, Precision::F64, &mut init.rng);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let xi = f.input(x);
        let y1 = cbr1.forward(&mut f, xi).unwrap();
        let y2 = cbr2.forward(&mut f, xi).unwrap();
        assert_eq!(f.tape.shape(y1), &[2, 5, 16, 16]);
        assert_eq!(f.tape.shape(y2), &[2, 5, 8, 8]);
        assert!(f.tape.value(y1).data().iter().all(|&v| v >= 0.0));
        assert_eq!(f.updates().len(), 2);
    }

    #[test]
    fn eval_without_running_stats_is_an_error_then_succeeds_after_update() {
        let mut store = ParamStore::new(Precision::F64);
        let mut init = Init::new(&mut store, 0);
        let bn = BatchNorm2d::new(&mut init, "bn", 2);
        let x = Tensor::randn(vec![3, 2, 2, 2], 1.0, Precision::F64, &mut init.rng);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Eval);
        let xi = f.input(x.clone());
        assert!(matches!(bn.forward(&mut f, xi), Err(Error::MissingRunningStats(_))));

        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let xi = f.input(x.clone());
        bn.forward(&mut f, xi).unwrap();
        let (updates, _) = f.into_updates();
        store.apply_stat_updates(&updates);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Eval);
        let xi = f.input(x);
        assert!(bn.forward(&mut f, xi).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new(Precision::F64);
        let m = store.add_buffer("m", Some(Tensor::zeros(vec![1], Precision::F64)));
        let v = store.add_buffer("v", Some(Tensor::ones(vec![1], Precision::F64)));
        let up = StatUpdate {
            mean: m,
            var: v,
            momentum: 0.1,
            stats: BatchNormStats {
                mean: vec![2.0],
                var: vec![3.0],
            },
        };
        store.apply_stat_updates(&[up]);
        assert!((store.buffer(m).unwrap().data()[0] - 0.2).abs() < 1e-15);
        assert!((store.buffer(v).unwrap().data()[0] - 1.2).abs() < 1e-15);
    }
}
