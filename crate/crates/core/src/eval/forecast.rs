use crate::error::Result;
use crate::memory::MemoryMode;
use crate::ssm::{last_frames, NestS6, StreamState};
use crate::tensor::Tensor;

/// Whether the newest frame of the window is an observation or a fed-back
/// prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Observed,
    FedBack,
}

/// Anything that maps a batch of windows `[B, T, H, W]` to next-frame
/// predictions `[B, H, W]`, with explicit per-stream state.
pub trait Forecaster {
    type State: Clone;

    fn init_state(&self, batch: usize) -> Self::State;

    fn step(&self, windows: &Tensor<f32>, state: &mut Self::State, kind: StepKind) -> Result<Tensor<f32>>;

    /// Reveals the ground truth `[B, H, W]` of the previous step's target
    /// before the next observed step.
    fn observe(&self, _state: &mut Self::State, _truth: &Tensor<f32>) {}
}

/// Repeats the last observed frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    type State = ();

    fn init_state(&self, _batch: usize) {}

    fn step(&self, windows: &Tensor<f32>, _state: &mut (), _kind: StepKind) -> Result<Tensor<f32>> {
        last_frames(windows)
    }
}

/// The trained model, with the slow learner either active or ablated
/// (no injection, no writes).
pub struct ModelForecaster<'a> {
    pub model: &'a NestS6<f32>,
    pub memory: bool,
}

impl<'a> ModelForecaster<'a> {
    pub fn new(model: &'a NestS6<f32>, memory: bool) -> Self {
        Self { model, memory: memory && model.config.memory }
    }
}

impl Forecaster for ModelForecaster<'_> {
    type State = StreamState<f32>;

    fn init_state(&self, batch: usize) -> StreamState<f32> {
        let mode = if self.memory { MemoryMode::TeacherForced } else { MemoryMode::Disabled };
        StreamState::new(batch, &self.model.config, mode)
    }

    fn step(&self, windows: &Tensor<f32>, state: &mut StreamState<f32>, kind: StepKind) -> Result<Tensor<f32>> {
        state.memory.mode = match (self.memory, kind) {
            (false, _) => MemoryMode::Disabled,
            (true, StepKind::Observed) => MemoryMode::TeacherForced,
            (true, StepKind::FedBack) => MemoryMode::FreeRunning,
        };
        self.model.step(windows, state)
    }

    fn observe(&self, state: &mut StreamState<f32>, truth: &Tensor<f32>) {
        state.truth = Some(truth.clone());
    }
}
