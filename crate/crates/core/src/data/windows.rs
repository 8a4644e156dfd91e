use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::patches::{crop, patch_origins, Origin};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown split {s:?}; expected train, val or test")))
    }
}

/// Chronological partition of the frame axis. A sample belongs to the
/// split containing its target frame; its inputs may reach back into the
/// preceding split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn new(n: usize, train_frac: f64, val_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
            return Err(Error::config(format!(
                "split fractions must satisfy train > 0, val >= 0, train + val < 1 (got {train_frac}, {val_frac})"
            )));
        }
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_val = (n as f64 * val_frac).round() as usize;
        let end_val = (n_train + n_val).min(n);
        Ok(Self { train: 0..n_train, val: n_train..end_val, test: end_val..n })
    }

    pub fn frames(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Indices `t` of the last input frame for every sample whose target
    /// `t + 1` lies in `split`.
    pub fn sample_times(&self, split: Split, history: usize) -> Range<usize> {
        let r = self.frames(split);
        let lo = r.start.saturating_sub(1).max(history.saturating_sub(1));
        let hi = r.end.saturating_sub(1);
        lo..hi.max(lo)
    }
}

/// Window geometry: `history` input frames of `patch_h x patch_w` cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub history: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchWindow<T: Scalar = f32> {
    pub origin: Origin,
    /// Index of the last input frame.
    pub t: usize,
    /// `[T, H_p, W_p]`, oldest first.
    pub x_seq: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T: Scalar = f32> {
    pub window: PatchWindow<T>,
    /// Frame `t + 1` at the same location, `[H_p, W_p]`.
    pub target: Tensor<T>,
}

impl WindowSpec {
    pub fn origins(&self, h: usize, w: usize) -> Result<Vec<Origin>> {
        patch_origins(h, w, self.patch_h, self.patch_w)
    }

    fn dims<T: Scalar>(frames: &Tensor<T>) -> Result<(usize, usize, usize)> {
        frames.expect_shape_rank(3, "frame stack")?;
        Ok((frames.shape()[0], frames.shape()[1], frames.shape()[2]))
    }

    fn append_window<T: Scalar>(&self, frames: &Tensor<T>, origin: Origin, t: usize, out: &mut Vec<T>) -> Result<()> {
        let (n, h, w) = Self::dims(frames)?;
        if t >= n || t + 1 < self.history {
            return Err(Error::Data(format!("window ending at frame {t} needs frames {}..={t} of {n}", t as i64 - self.history as i64 + 1)));
        }
        for k in t + 1 - self.history..=t {
            crop(&frames.data()[k * h * w..(k + 1) * h * w], w, origin, self.patch_h, self.patch_w, out);
        }
        Ok(())
    }

    fn append_patch<T: Scalar>(&self, frames: &Tensor<T>, origin: Origin, t: usize, out: &mut Vec<T>) -> Result<()> {
        let (n, h, w) = Self::dims(frames)?;
        if t >= n {
            return Err(Error::Data(format!("frame {t} out of range for {n} frames")));
        }
        crop(&frames.data()[t * h * w..(t + 1) * h * w], w, origin, self.patch_h, self.patch_w, out);
        Ok(())
    }

    /// Input window `[T, H_p, W_p]` ending at frame `t`.
    pub fn window<T: Scalar>(&self, frames: &Tensor<T>, origin: Origin, t: usize) -> Result<PatchWindow<T>> {
        let mut buf = Vec::with_capacity(self.history * self.patch_h * self.patch_w);
        self.append_window(frames, origin, t, &mut buf)?;
        Ok(PatchWindow { origin, t, x_seq: Tensor::new(vec![self.history, self.patch_h, self.patch_w], buf)? })
    }

    /// The `[H_p, W_p]` patch of frame `t`.
    pub fn patch<T: Scalar>(&self, frames: &Tensor<T>, origin: Origin, t: usize) -> Result<Tensor<T>> {
        let mut buf = Vec::with_capacity(self.patch_h * self.patch_w);
        self.append_patch(frames, origin, t, &mut buf)?;
        Tensor::new(vec![self.patch_h, self.patch_w], buf)
    }

    /// Batched inputs `[B, T, H_p, W_p]` for `(origin, t)` keys.
    pub fn batch_windows<T: Scalar>(&self, frames: &Tensor<T>, keys: &[(Origin, usize)]) -> Result<Tensor<T>> {
        let mut buf = Vec::with_capacity(keys.len() * self.history * self.patch_h * self.patch_w);
        for &(o, t) in keys {
            self.append_window(frames, o, t, &mut buf)?;
        }
        Tensor::new(vec![keys.len(), self.history, self.patch_h, self.patch_w], buf)
    }

    /// Batched patches `[B, H_p, W_p]` of frames `t + offset`.
    pub fn batch_patches<T: Scalar>(&self, frames: &Tensor<T>, keys: &[(Origin, usize)], offset: usize) -> Result<Tensor<T>> {
        let mut buf = Vec::with_capacity(keys.len() * self.patch_h * self.patch_w);
        for &(o, t) in keys {
            self.append_patch(frames, o, t + offset, &mut buf)?;
        }
        Tensor::new(vec![keys.len(), self.patch_h, self.patch_w], buf)
    }
}

/// Every (window, next-frame target) pair, grouped by patch location in
/// row-major order and chronological within each location.
pub fn make_windows<T: Scalar>(frames: &Tensor<T>, spec: WindowSpec) -> Result<Vec<Sample<T>>> {
    frames.expect_shape_rank(3, "frame stack")?;
    let (n, h, w) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    if n < spec.history + 1 {
        return Err(Error::Data(format!("{n} frames cannot form a window of {} plus a target", spec.history)));
    }
    let mut out = Vec::new();
    for origin in spec.origins(h, w)? {
        for t in spec.history - 1..n - 1 {
            out.push(Sample { window: spec.window(frames, origin, t)?, target: spec.patch(frames, origin, t + 1)? });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, h, w], |i| i as f32)
    }

    const SPEC: WindowSpec = WindowSpec { history: 6, patch_h: 2, patch_w: 2 };

    #[test]
    fn seven_frames_give_one_sample_per_location() {
        let s = make_windows(&series(7, 4, 6), SPEC).unwrap();
        assert_eq!(s.len(), 6);
        assert!(make_windows(&series(6, 4, 6), SPEC).is_err());
    }

    #[test]
    fn consecutive_samples_share_frames() {
        let s = make_windows(&series(12, 2, 2), SPEC).unwrap();
        for pair in s.windows(2) {
            assert_eq!(pair[0].window.x_seq.data()[4..], pair[1].window.x_seq.data()[..20]);
            assert_eq!(pair[1].window.t, pair[0].window.t + 1);
        }
    }

    #[test]
    fn targets_are_next_frame_slices() {
        let f = series(9, 4, 4);
        for s in make_windows(&f, SPEC).unwrap() {
            let (r0, c0) = s.window.origin;
            let t1 = s.window.t + 1;
            let expect: Vec<f32> =
                (0..2).flat_map(|r| (0..2).map(move |c| ((t1 * 4 + r0 + r) * 4 + c0 + c) as f32)).collect();
            assert_eq!(s.target.data(), expect.as_slice());
            let last: Vec<f32> = expect.iter().map(|v| v - 16.0).collect();
            assert_eq!(&s.window.x_seq.data()[20..], last.as_slice());
        }
    }

    #[test]
    fn batches_match_single_windows() {
        let f = series(10, 4, 4);
        let keys = [((0, 2), 5), ((2, 0), 8)];
        let b = SPEC.batch_windows(&f, &keys).unwrap();
        assert_eq!(b.shape(), &[2, 6, 2, 2]);
        assert_eq!(b.data()[24..], *SPEC.window(&f, (2, 0), 8).unwrap().x_seq.data());
        let y = SPEC.batch_patches(&f, &keys, 1).unwrap();
        assert_eq!(y.data()[..4], *SPEC.patch(&f, (0, 2), 6).unwrap().data());
    }

    #[test]
    fn splits_are_chronological_and_disjoint() {
        let s = Splits::new(1000, 0.7, 0.1).unwrap();
        assert_eq!((s.train.clone(), s.val.clone(), s.test.clone()), (0..700, 700..800, 800..1000));
        let tr = s.sample_times(Split::Train, 6);
        let va = s.sample_times(Split::Val, 6);
        let te = s.sample_times(Split::Test, 6);
        assert_eq!(tr, 5..699);
        assert_eq!(va, 699..799);
        assert_eq!(te, 799..999);
        // max target index of each split precedes the next split's first target
        assert!(tr.end < va.start + 1 && va.end < te.start + 1);
        assert!(Splits::new(10, 0.9, 0.2).is_err());
    }
}
