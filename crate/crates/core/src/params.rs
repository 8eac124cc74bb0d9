//! Named parameter storage and the per-forward session that binds it to a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::rtr::export::AttentionRecorder;
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// Running statistics; updated outside the tape.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let mut value = value;
        Precision::F32.round_slice(value.data_mut());
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape(), "parameter {} changed shape", self.entries[id.0].name);
        self.entries[id.0].value = value;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight).map(|e| e.value.len()).sum()
    }
}

/// Seeded initializer that registers parameters under a dotted name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `scope` appended to the name prefix.
    pub fn scoped<T>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.push(scope);
        let out = f(self);
        self.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let name = self.name(leaf);
        self.store.add(name, ParamKind::Weight, Tensor::new(shape, data).expect("shape matches"))
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, ParamKind::Weight, Tensor::full(shape, value))
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, ParamKind::Buffer, Tensor::full(shape, value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from one batch-norm call.
#[derive(Debug, Clone)]
pub struct StatsUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch: BatchStats,
}

/// One forward evaluation: a fresh tape, lazily bound parameters, the
/// train/eval switch and the per-call drop-attention state.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    drop_p: f64,
    drop_rng: Option<ChaCha8Rng>,
    stats: Vec<StatsUpdate>,
    pub(crate) recorder: Option<AttentionRecorder>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, precision: Precision) -> Self {
        Self {
            tape: Tape::new(precision),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads: mode == Mode::Train,
            drop_p: 0.0,
            drop_rng: None,
            stats: Vec::new(),
            recorder: None,
        }
    }

    /// Forces gradient tracking on or off regardless of mode.
    pub fn track_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    /// Enables drop-attention for this call (train mode only).
    pub fn with_drop_attention(mut self, p: f64, seed: u64) -> Self {
        self.drop_p = p;
        self.drop_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn record_attention(mut self) -> Self {
        self.recorder = Some(AttentionRecorder::default());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &'s Tensor {
        self.store.get(id)
    }

    pub(crate) fn push_stats(&mut self, update: StatsUpdate) {
        self.stats.push(update);
    }

    pub fn take_stats(&mut self) -> Vec<StatsUpdate> {
        std::mem::take(&mut self.stats)
    }

    /// Drop probability and RNG, when drop-attention is active.
    pub(crate) fn drop_state(&mut self) -> Option<(f64, &mut ChaCha8Rng)> {
        if self.mode != Mode::Train || self.drop_p <= 0.0 {
            return None;
        }
        let p = self.drop_p;
        self.drop_rng.as_mut().map(|r| (p, r))
    }

    pub fn take_records(&mut self) -> Vec<crate::rtr::export::AttentionRecord> {
        self.recorder.take().map(|r| r.records).unwrap_or_default()
    }

    /// Per-parameter gradients; `None` for parameters never touched.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.map(|v| grads.wrt(v))).collect()
    }
}
