//! Plates and plate-indexed parameter fields.
//!
//! A [`Field`] stores one block of per-element data (a natural-parameter
//! block, a moment block, a scalar weight) over a plate shape. Axes of size
//! one broadcast: a field of shape `(1, D)` inside a `(N, D)` frame holds one
//! value per column that is shared by every row. Keeping shared axes
//! collapsed is what lets the graph skip redundant per-element work.

use crate::error::{Error, Result};

/// Repetition axes of a node, trailing-aligned when broadcast.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Plates(pub Vec<usize>);

impl Plates {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Self(dims.into())
    }

    pub fn scalar() -> Self {
        Self(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn size(&self) -> usize {
        self.0.iter().product()
    }

    /// Trailing-aligned elementwise broadcast.
    pub fn broadcast(&self, other: &Plates) -> Result<Plates> {
        broadcast_shapes(&self.0, &other.0).map(Plates)
    }

    /// Whether `self` broadcasts into `target` without changing `target`.
    pub fn fits_in(&self, target: &Plates) -> bool {
        if self.rank() > target.rank() {
            return self.0[..self.rank() - target.rank()].iter().all(|&d| d == 1)
                && Plates(self.0[self.rank() - target.rank()..].to_vec()).fits_in(target);
        }
        let off = target.rank() - self.rank();
        self.0
            .iter()
            .enumerate()
            .all(|(i, &d)| d == 1 || d == target.0[off + i])
    }
}

impl From<Vec<usize>> for Plates {
    fn from(v: Vec<usize>) -> Self {
        Plates(v)
    }
}

impl From<&[usize]> for Plates {
    fn from(v: &[usize]) -> Self {
        Plates(v.to_vec())
    }
}

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1; rank];
    for (i, o) in out.iter_mut().enumerate() {
        let da = axis_from_end(a, rank - 1 - i);
        let db = axis_from_end(b, rank - 1 - i);
        *o = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::PlateMismatch {
                    a: a.to_vec(),
                    b: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn axis_from_end(shape: &[usize], from_end: usize) -> usize {
    if from_end < shape.len() {
        shape[shape.len() - 1 - from_end]
    } else {
        1
    }
}

/// Pad `shape` with leading ones up to `rank`, dropping leading unit axes
/// beyond it.
pub fn align(shape: &[usize], rank: usize) -> Vec<usize> {
    if shape.len() >= rank {
        let extra = shape.len() - rank;
        debug_assert!(
            shape[..extra].iter().all(|&d| d == 1),
            "cannot align {shape:?} to rank {rank}"
        );
        shape[extra..].to_vec()
    } else {
        let mut out = vec![1; rank - shape.len()];
        out.extend_from_slice(shape);
        out
    }
}

/// One parameter block over a (possibly collapsed) plate shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    shape: Vec<usize>,
    event: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn new(shape: Vec<usize>, event: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>() * event,
            "field data length does not match shape {shape:?} x {event}"
        );
        Self { shape, event, data }
    }

    pub fn zeros(shape: Vec<usize>, event: usize) -> Self {
        let n = shape.iter().product::<usize>() * event;
        Self::new(shape, event, vec![0.0; n])
    }

    /// A single element shared by every plate position.
    pub fn uniform(value: Vec<f64>) -> Self {
        let event = value.len();
        Self::new(Vec::new(), event, value)
    }

    pub fn scalar(v: f64) -> Self {
        Self::uniform(vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn event(&self) -> usize {
        self.event
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of stored elements (not counting broadcast repetition).
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn elem(&self, i: usize) -> &[f64] {
        &self.data[i * self.event..(i + 1) * self.event]
    }

    pub fn elem_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.event..(i + 1) * self.event]
    }

    pub fn elements(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.event.max(1))
    }

    /// Element at a multi-index of `frame`, following broadcast rules.
    pub fn at(&self, frame: &[usize], index: &[usize]) -> &[f64] {
        let shape = align(&self.shape, frame.len());
        let mut flat = 0;
        for (i, &s) in shape.iter().enumerate() {
            flat = flat * s + if s == 1 { 0 } else { index[i] };
        }
        self.elem(flat)
    }

    /// Materialize every broadcast axis so the shape equals `target`.
    pub fn expand_to(&self, target: &[usize]) -> Field {
        if self.shape == target {
            return self.clone();
        }
        let event = self.event;
        apply(&[self], target, target, true, event, |x, out| out.copy_from_slice(x[0]))
    }

    /// Reinterpret the event as a trailing plate axis of scalars.
    pub fn unfold_event(&self) -> Field {
        let mut shape = self.shape.clone();
        shape.push(self.event);
        Field::new(shape, 1, self.data.clone())
    }

    /// Inverse of [`Field::unfold_event`]; a collapsed trailing axis is
    /// expanded to `k` first.
    pub fn fold_last_axis(&self, k: usize) -> Field {
        assert_eq!(self.event, 1);
        let mut shape = self.shape.clone();
        let last = shape.pop().unwrap_or(1);
        if last == k {
            return Field::new(shape, k, self.data.clone());
        }
        assert_eq!(last, 1);
        let mut full = shape.clone();
        full.push(k);
        self.expand_to(&full).fold_last_axis(k)
    }

    /// Append a trailing unit axis.
    pub fn with_trailing_axis(&self) -> Field {
        let mut shape = self.shape.clone();
        shape.push(1);
        Field::new(shape, self.event, self.data.clone())
    }

    /// Drop a trailing axis that has been reduced to size one.
    pub fn without_trailing_axis(mut self) -> Field {
        let last = self.shape.pop();
        assert!(matches!(last, None | Some(1)));
        self
    }

    /// Elementwise sum under broadcasting.
    pub fn add(&self, other: &Field) -> Field {
        assert_eq!(self.event, other.event);
        let frame = broadcast_shapes(&self.shape, &other.shape).expect("incompatible field shapes");
        apply(&[self, other], &frame, &frame, false, self.event, |x, out| {
            for (o, (a, b)) in out.iter_mut().zip(x[0].iter().zip(x[1])) {
                *o = a + b;
            }
        })
    }

    pub fn scale(&self, s: f64) -> Field {
        Field::new(
            self.shape.clone(),
            self.event,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    /// Largest absolute elementwise difference under broadcasting.
    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        let frame = broadcast_shapes(&self.shape, &other.shape).expect("incompatible field shapes");
        let diff = apply(&[self, other], &frame, &frame, false, 1, |x, out| {
            out[0] = x[0]
                .iter()
                .zip(x[1])
                .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
                .fold(0.0, f64::max);
        });
        diff.data.iter().cloned().fold(0.0, f64::max)
    }

    /// Sum over all plate positions of `frame` (broadcast axes counted with
    /// multiplicity) of each event component.
    pub fn total(&self, frame: &[usize]) -> Vec<f64> {
        let event = self.event;
        apply(&[self], frame, &[], false, event, |x, out| out.copy_from_slice(x[0])).data
    }
}

/// Evaluate `kernel` over the broadcast of `inputs` inside `frame` and
/// accumulate into a field aligned with `target`.
///
/// Every input shape and `target` must broadcast into `frame`. Axes where the
/// target has size one are reduced: summed when some input varies along
/// them, multiplied by the frame size otherwise. Axes where the target is
/// full keep whatever extent the inputs have, so shared values stay
/// collapsed unless `expand` forces full materialization.
pub fn apply<F>(
    inputs: &[&Field],
    frame: &[usize],
    target: &[usize],
    expand: bool,
    event: usize,
    mut kernel: F,
) -> Field
where
    F: FnMut(&[&[f64]], &mut [f64]),
{
    let rank = frame.len();
    let tgt = align(target, rank);
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|f| align(&f.shape, rank)).collect();

    let mut iter_shape = vec![1usize; rank];
    for s in &shapes {
        for i in 0..rank {
            if s[i] != 1 {
                debug_assert_eq!(s[i], frame[i], "input shape {s:?} does not fit frame {frame:?}");
                iter_shape[i] = frame[i];
            }
        }
    }
    for i in 0..rank {
        debug_assert!(
            tgt[i] == 1 || tgt[i] == frame[i],
            "target {tgt:?} does not fit frame {frame:?}"
        );
        if expand && tgt[i] != 1 {
            iter_shape[i] = frame[i];
        }
    }
    let res_shape: Vec<usize> = (0..rank).map(|i| if tgt[i] == 1 { 1 } else { iter_shape[i] }).collect();
    let mult: f64 = (0..rank)
        .filter(|&i| tgt[i] == 1 && iter_shape[i] == 1)
        .map(|i| frame[i] as f64)
        .product();

    let in_strides: Vec<Vec<usize>> = shapes.iter().zip(inputs).map(|(s, f)| strides(s, f.event)).collect();
    let res_strides = strides(&res_shape, event);

    let total: usize = iter_shape.iter().product();
    let res_len: usize = res_shape.iter().product::<usize>() * event;
    let mut res = vec![0.0; res_len];
    let mut tmp = vec![0.0; event];
    let mut offsets = vec![0usize; inputs.len()];
    let mut res_off = 0usize;
    let mut idx = vec![0usize; rank];
    let mut views: Vec<&[f64]> = Vec::with_capacity(inputs.len());

    for _ in 0..total {
        views.clear();
        for (j, f) in inputs.iter().enumerate() {
            views.push(&f.data[offsets[j]..offsets[j] + f.event]);
        }
        kernel(&views, &mut tmp);
        let dst = &mut res[res_off..res_off + event];
        if mult == 1.0 {
            for (d, t) in dst.iter_mut().zip(&tmp) {
                *d += t;
            }
        } else {
            for (d, t) in dst.iter_mut().zip(&tmp) {
                *d += mult * t;
            }
        }

        // Odometer increment over iter_shape.
        let mut axis = rank;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            for (j, st) in in_strides.iter().enumerate() {
                offsets[j] += st[axis];
            }
            res_off += res_strides[axis];
            if idx[axis] < iter_shape[axis] {
                break;
            }
            let back = iter_shape[axis];
            for (j, st) in in_strides.iter().enumerate() {
                offsets[j] -= st[axis] * back;
            }
            res_off -= res_strides[axis] * back;
            idx[axis] = 0;
        }
    }

    let out_rank = target.len();
    Field::new(res_shape[rank - out_rank..].to_vec(), event, res)
}

fn strides(shape: &[usize], event: usize) -> Vec<usize> {
    let mut st = vec![0; shape.len()];
    let mut acc = event;
    for i in (0..shape.len()).rev() {
        st[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    st
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plate_broadcast_examples() {
        let k = Plates::new(vec![5]);
        assert_eq!(k.broadcast(&Plates::scalar()).unwrap(), k);
        let n1 = Plates::new(vec![7, 1]);
        assert_eq!(n1.broadcast(&k).unwrap(), Plates::new(vec![7, 5]));
        let err = Plates::new(vec![3]).broadcast(&Plates::new(vec![4]));
        assert!(matches!(err, Err(Error::PlateMismatch { .. })));
    }

    #[test]
    fn fits_in_respects_trailing_alignment() {
        let t = Plates::new(vec![4, 3]);
        assert!(Plates::new(vec![3]).fits_in(&t));
        assert!(Plates::new(vec![4, 1]).fits_in(&t));
        assert!(!Plates::new(vec![4]).fits_in(&t));
        assert!(Plates::new(vec![1, 4, 3]).fits_in(&t));
    }

    #[test]
    fn reduce_counts_collapsed_axes() {
        // A shared value inside a (3, 4) frame reduced to a scalar is
        // multiplied by 12.
        let f = Field::scalar(2.0);
        let r = apply(&[&f], &[3, 4], &[], false, 1, |x, o| o[0] = x[0][0]);
        assert_eq!(r.data(), &[24.0]);
        // Column-varying field reduced over rows keeps its columns.
        let g = Field::new(vec![4], 1, vec![1.0, 2.0, 3.0, 4.0]);
        let r = apply(&[&g], &[3, 4], &[4], false, 1, |x, o| o[0] = x[0][0]);
        assert_eq!(r.shape(), &[4]);
        assert_eq!(r.data(), &[3.0, 6.0, 9.0, 12.0]);
        // Full target with a collapsed input stays collapsed unless expanded.
        let r = apply(&[&f], &[3, 4], &[3, 4], false, 1, |x, o| o[0] = x[0][0]);
        assert_eq!(r.shape(), &[1, 1]);
        let r = apply(&[&f], &[3, 4], &[3, 4], true, 1, |x, o| o[0] = x[0][0]);
        assert_eq!(r.shape(), &[3, 4]);
    }

    #[test]
    fn outer_broadcast_product() {
        let a = Field::new(vec![2, 1], 1, vec![1.0, 2.0]);
        let b = Field::new(vec![3], 1, vec![10.0, 20.0, 30.0]);
        let r = apply(&[&a, &b], &[2, 3], &[2, 3], false, 1, |x, o| o[0] = x[0][0] * x[1][0]);
        assert_eq!(r.shape(), &[2, 3]);
        assert_eq!(r.data(), &[10.0, 20.0, 30.0, 20.0, 40.0, 60.0]);
    }

    #[test]
    fn fold_and_unfold() {
        let f = Field::new(vec![2], 3, (0..6).map(f64::from).collect());
        let u = f.unfold_event();
        assert_eq!(u.shape(), &[2, 3]);
        assert_eq!(u.fold_last_axis(3), f);
        let shared = Field::new(vec![2, 1], 1, vec![5.0, 6.0]);
        let folded = shared.fold_last_axis(3);
        assert_eq!(folded.data(), &[5.0, 5.0, 5.0, 6.0, 6.0, 6.0]);
    }

    fn shape_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<bool>, Vec<bool>)> {
        prop::collection::vec(1usize..4, 0..4).prop_flat_map(|frame| {
            let r = frame.len();
            (
                Just(frame),
                prop::collection::vec(any::<bool>(), r),
                prop::collection::vec(any::<bool>(), r),
            )
        })
    }

    proptest! {
        // Reducing a collapsed field must equal reducing its expansion.
        #[test]
        fn collapsed_equals_expanded((frame, keep_in, keep_tgt) in shape_strategy(), seed in 0u64..1000) {
            let in_shape: Vec<usize> = frame.iter().zip(&keep_in).map(|(&d, &k)| if k { d } else { 1 }).collect();
            let tgt: Vec<usize> = frame.iter().zip(&keep_tgt).map(|(&d, &k)| if k { d } else { 1 }).collect();
            let n: usize = in_shape.iter().product();
            let data: Vec<f64> = (0..n * 2).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
            let f = Field::new(in_shape, 2, data);
            let full = f.expand_to(&frame);
            let a = apply(&[&f], &frame, &tgt, false, 2, |x, o| o.copy_from_slice(x[0])).expand_to(&tgt);
            let b = apply(&[&full], &frame, &tgt, false, 2, |x, o| o.copy_from_slice(x[0]));
            prop_assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
