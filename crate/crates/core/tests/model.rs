use nests6_core::data::{synth_generate, Dataset, DriftKind, DriftSpec, SynthConfig, WindowSpec};
use nests6_core::eval::drift_eval;
use nests6_core::memory::MemoryMode;
use nests6_core::rng::stream_rng;
use nests6_core::ssm::{build_input, ModelConfig, NestS6, StreamState};
use nests6_core::tensor::{Tape, Tensor};
use rand::Rng;

fn cfg() -> ModelConfig {
    ModelConfig { channels: 6, state_dim: 3, n_blocks: 2, patch_h: 8, patch_w: 8, history: 4, ..Default::default() }
}

fn windows(b: usize, t: usize, seed: u64) -> Tensor<f32> {
    let mut rng = stream_rng(seed, "windows");
    Tensor::from_fn(&[b, t, 8, 8], |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn zero_memory_without_writes_matches_memory_free_path() {
    let with = NestS6::<f32>::new(cfg(), 7).unwrap();
    let without = with.without_memory();
    let mut a = StreamState::new(3, &with.config, MemoryMode::FreeRunning);
    let mut b = StreamState::new(3, &without.config, MemoryMode::Disabled);
    for s in 0..4 {
        let w = windows(3, 4, s);
        let ya = with.step(&w, &mut a).unwrap();
        let yb = without.step(&w, &mut b).unwrap();
        assert_eq!(ya, yb);
        assert!(a.memory.m.data().iter().all(|&x| x == 0.0));
    }
    assert_eq!(a.memory.writes(), 0);
}

#[test]
fn memory_changes_predictions_once_written() {
    let model = NestS6::<f32>::new(cfg(), 7).unwrap();
    let mut tf = StreamState::new(1, &model.config, MemoryMode::TeacherForced);
    let w = windows(1, 4, 1);
    model.step(&w, &mut tf).unwrap();
    let y_mem = model.step(&w, &mut tf).unwrap();
    let y_off = model.without_memory().predict_patch(&w.clone().reshape(&[4, 8, 8]).unwrap(), None).unwrap();
    assert_ne!(y_mem.data(), y_off.data());
}

#[test]
fn output_shape_is_patch_for_any_history() {
    let model = NestS6::<f32>::new(cfg(), 1).unwrap();
    for t in 1..=5 {
        let y = model.predict_patch(&windows(1, t, 2).reshape(&[t, 8, 8]).unwrap(), None).unwrap();
        assert_eq!(y.shape(), &[8, 8]);
    }
    assert!(model.predict_patch(&Tensor::zeros(&[4, 6, 8]), None).is_err());
}

#[test]
fn predictions_are_deterministic() {
    let w = windows(2, 4, 3);
    let run = || {
        let m = NestS6::<f32>::new(cfg(), 9).unwrap();
        let mut s = StreamState::new(2, &m.config, MemoryMode::TeacherForced);
        (m.step(&w, &mut s).unwrap(), m.step(&w, &mut s).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn predicted_coefficients_are_stable() {
    let model = NestS6::<f64>::new(cfg(), 4).unwrap();
    let mut rng = stream_rng(0, "z");
    let z = Tensor::from_fn(&[5, 6, 8, 8], |_| rng.gen_range(-3.0..3.0));
    for block in 0..2 {
        let p = model.predict_params(block, &z).unwrap();
        assert!(p.delta.data().iter().all(|&d| d >= model.config.delta_min));
        let (d, s) = (6, 3);
        for row in 0..5 {
            for c in 0..d {
                for k in 0..s {
                    let a = p.a_eff.data()[row * d * s + c * s + k];
                    for px in 0..64 {
                        let dl = p.delta.data()[((row * d) + c) * 64 + px];
                        let decay = (a * dl).exp();
                        assert!(decay > 0.0 && decay < 1.0);
                    }
                }
            }
        }
    }
}

/// Stem conv, depthwise conv and window attention composed: an output
/// pixel only sees inputs within its window grown by the two 3x3 kernels.
#[test]
fn spatial_mixing_receptive_field() {
    let model = NestS6::<f64>::new(cfg(), 5).unwrap();
    let chain = |w: &Tensor<f64>| {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let u = tape.constant(build_input(w).unwrap());
        let z = model.stem_on(&mut tape, &p, u).unwrap();
        let g = |n: &str| p.get(&format!("fast.blocks.0.{n}")).unwrap();
        let z = tape.conv2d(z, g("dw.w"), Some(g("dw.b")), 6, 1).unwrap();
        let q = tape.conv2d(z, g("attn.q.w"), Some(g("attn.q.b")), 1, 0).unwrap();
        let k = tape.conv2d(z, g("attn.k.w"), Some(g("attn.k.b")), 1, 0).unwrap();
        let v = tape.conv2d(z, g("attn.v.w"), Some(g("attn.v.b")), 1, 0).unwrap();
        let o = tape.window_attention(q, k, v, 4).unwrap();
        tape.value(o).clone()
    };
    let w = windows(1, 1, 6).cast::<f64>();
    let base = chain(&w);
    let at = |t: &Tensor<f64>, c: usize, i: usize, j: usize| t.data()[c * 64 + i * 8 + j];
    let mut far = w.clone();
    far.data_mut()[7 * 8 + 7] += 1.0;
    let moved = chain(&far);
    let mut near = w.clone();
    near.data_mut()[5 * 8 + 5] += 1.0;
    let nudged = chain(&near);
    for c in 0..6 {
        assert_eq!(at(&base, c, 0, 0), at(&moved, c, 0, 0));
    }
    assert!((0..6).any(|c| at(&base, c, 0, 0) != at(&nudged, c, 0, 0)));
}

#[test]
fn evaluation_does_not_touch_parameters() {
    let series = synth_generate(&SynthConfig { height: 16, width: 16, frames: 80, ..Default::default() }).unwrap();
    let data = Dataset::prepare(&series, WindowSpec { history: 4, patch_h: 8, patch_w: 8 }, 0.7, 0.1, None).unwrap();
    let model = NestS6::<f32>::new(cfg(), 2).unwrap();
    let before = model.params.checksum();
    for kind in DriftKind::ALL {
        drift_eval(&model, &data, &DriftSpec::of(kind), true).unwrap();
    }
    assert_eq!(model.params.checksum(), before);
}
