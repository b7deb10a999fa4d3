//! Per-tracklet features: an appearance stream and a box-geometry stream are
//! mapped by per-frame MLPs, mixed by a 1-D convolution over frames, then
//! chunk-mean pooled and projected to one fixed-size vector per tracklet.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::graph::Tracklet;
use crate::nn::{self, Bound, ParamStore};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("appearance has {app} frames but spatial has {spat}")]
    RowMismatch { app: usize, spat: usize },
    #[error("appearance width {got} does not match the model's {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("non-finite values in input features")]
    NonFinite,
}

/// Shapes of the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Appearance input width.
    pub d_a: usize,
    /// Entity feature width (conv output and pooled vector).
    pub d_e: usize,
    /// Hidden width of every MLP in the extractor.
    pub hidden: usize,
    /// Number of mean-pooled chunks.
    pub pool_len: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { d_a: 1024, d_e: 512, hidden: 512, pool_len: 4 }
    }
}

impl FeatureConfig {
    /// Registers the extractor's parameters under `prefix`.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) {
        nn::init_mlp(store, &format!("{prefix}.app"), self.d_a, self.hidden, self.d_e, rng);
        nn::init_mlp(store, &format!("{prefix}.spat"), 8, self.hidden, self.d_e, rng);
        nn::init_conv1d(store, &format!("{prefix}.conv"), 3, 2 * self.d_e, self.d_e, rng);
        nn::init_mlp(
            store,
            &format!("{prefix}.pool"),
            self.pool_len * self.d_e,
            self.hidden,
            self.d_e,
            rng,
        );
    }
}

/// Per-frame box geometry rows `[box; next box − box]`; the last frame gets a
/// zero motion offset. Boxes are assumed normalized to the frame.
pub fn spatial_feature(t: &Tracklet) -> Tensor {
    let l = t.len();
    assert!(l > 0, "spatial_feature on empty tracklet");
    let mut out = Tensor::zeros(vec![l, 8]);
    for i in 0..l {
        let b = &t.boxes[i];
        let next = if i + 1 < l { &t.boxes[i + 1] } else { b };
        let row = out.row_mut(i);
        row[..4].copy_from_slice(b);
        for j in 0..4 {
            row[4 + j] = next[j] - b[j];
        }
    }
    out
}

/// Tape-level feature extraction. Returns the per-frame sequence
/// (frames × d_e) and the pooled vector (1 × d_e).
pub fn tracklet_feature_vars(
    tape: &Tape,
    bound: &Bound,
    prefix: &str,
    appearance: Var,
    spatial: Var,
    pool_len: usize,
) -> (Var, Var) {
    let a = nn::mlp(tape, bound, &format!("{prefix}.app"), appearance);
    let s = nn::mlp(tape, bound, &format!("{prefix}.spat"), spatial);
    let mixed = tape.concat_cols(&[a, s]);
    let seq = nn::conv1d(tape, bound, &format!("{prefix}.conv"), mixed);
    let d_e = tape.value(seq).cols();
    let chunks = tape.chunk_mean_rows(seq, pool_len);
    let flat = tape.reshape(chunks, vec![1, pool_len * d_e]);
    let pooled = nn::mlp(tape, bound, &format!("{prefix}.pool"), flat);
    (seq, pooled)
}

/// Feature of one tracklet: full per-frame sequence plus the pooled vector
/// (kept as a 1 × d_e row so stacking entities is a plain row concat).
#[derive(Clone, Debug, PartialEq)]
pub struct TrackletFeature {
    pub sequence: Tensor,
    pub pooled: Tensor,
}

/// Runs the extractor outside any training loop.
pub fn tracklet_feature(
    appearance: &Tensor,
    spatial: &Tensor,
    store: &ParamStore,
    prefix: &str,
    pool_len: usize,
) -> Result<TrackletFeature, FeatureError> {
    if appearance.rows() != spatial.rows() {
        return Err(FeatureError::RowMismatch { app: appearance.rows(), spat: spatial.rows() });
    }
    let want = store.get(&format!("{prefix}.app.l1.w")).rows();
    if appearance.cols() != want {
        return Err(FeatureError::WidthMismatch { got: appearance.cols(), want });
    }
    if !appearance.is_finite() || !spatial.is_finite() {
        return Err(FeatureError::NonFinite);
    }
    let tape = Tape::new();
    let bound = Bound::bind(&tape, store);
    let app = tape.constant(appearance.clone());
    let spat = tape.constant(spatial.clone());
    let (seq, pooled) = tracklet_feature_vars(&tape, &bound, prefix, app, spat, pool_len);
    Ok(TrackletFeature { sequence: tape.value_clone(seq), pooled: tape.value_clone(pooled) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_diff_grads, max_rel_error, xavier};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> FeatureConfig {
        FeatureConfig { d_a: 5, d_e: 6, hidden: 7, pool_len: 4 }
    }

    fn tiny_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        tiny_cfg().init(&mut store, "feat", &mut rng);
        store
    }

    #[test]
    fn spatial_feature_encodes_box_and_motion() {
        let t = Tracklet {
            id: 0,
            category: 0,
            start_frame: 0,
            frame_count: 4,
            boxes: vec![
                [0.0, 0.0, 0.25, 0.25],
                [0.125, 0.0, 0.375, 0.25],
                [0.25, 0.0, 0.5, 0.25],
            ],
        };
        let s = spatial_feature(&t);
        assert_eq!(s.shape(), [3, 8]);
        assert_eq!(s.row(0), &[0.0, 0.0, 0.25, 0.25, 0.125, 0.0, 0.125, 0.0]);
        // last frame: the box itself, zero motion
        assert_eq!(s.row(2), &[0.25, 0.0, 0.5, 0.25, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sequence_rows_match_frame_count() {
        let store = tiny_store(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for frames in [1usize, 2, 3, 9] {
            let app = xavier(&mut rng, frames, 5);
            let spat = xavier(&mut rng, frames, 8);
            let f = tracklet_feature(&app, &spat, &store, "feat", 4).unwrap();
            assert_eq!(f.sequence.shape(), [frames, 6]);
            assert_eq!(f.pooled.shape(), [1, 6]);
        }
    }

    #[test]
    fn zeroed_params_give_zero_pooled_vector() {
        let mut store = tiny_store(3);
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let z = store.get(&n).map(|_| 0.0);
            *store.get_mut(&n) = z;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let app = xavier(&mut rng, 6, 5);
        let spat = xavier(&mut rng, 6, 8);
        let f = tracklet_feature(&app, &spat, &store, "feat", 4).unwrap();
        assert!(f.pooled.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_input_rows_give_constant_sequence_rows() {
        let store = tiny_store(5);
        let app = Tensor::from_rows(&vec![vec![0.3, -0.1, 0.7, 0.2, 0.0]; 7]);
        let spat = Tensor::from_rows(&vec![vec![0.1, 0.2, 0.5, 0.6, 0.0, 0.0, 0.0, 0.0]; 7]);
        let f = tracklet_feature(&app, &spat, &store, "feat", 4).unwrap();
        for r in 1..7 {
            assert_eq!(f.sequence.row(r), f.sequence.row(0), "row {r} drifted");
        }
    }

    #[test]
    fn pooled_is_invariant_to_permutations_within_a_chunk() {
        // Chunk-mean pooling ignores frame order inside one chunk.
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = xavier(&mut rng, 8, 6); // pool_len 4 -> chunks of 2 rows
        let mut swapped = seq.clone();
        for chunk in 0..4 {
            let (a, b) = (2 * chunk, 2 * chunk + 1);
            let row_a = seq.row(a).to_vec();
            let row_b = seq.row(b).to_vec();
            swapped.row_mut(a).copy_from_slice(&row_b);
            swapped.row_mut(b).copy_from_slice(&row_a);
        }
        let x = tape.constant(seq);
        let y = tape.constant(swapped);
        let px = tape.chunk_mean_rows(x, 4);
        let py = tape.chunk_mean_rows(y, 4);
        let (vx, vy) = (tape.value_clone(px), tape.value_clone(py));
        for (a, b) in vx.data().iter().zip(vy.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_and_finiteness_violations_are_rejected() {
        let store = tiny_store(3);
        let app = Tensor::zeros(vec![4, 5]);
        let spat = Tensor::zeros(vec![3, 8]);
        assert_eq!(
            tracklet_feature(&app, &spat, &store, "feat", 4).unwrap_err(),
            FeatureError::RowMismatch { app: 4, spat: 3 }
        );
        let wide = Tensor::zeros(vec![3, 9]);
        let spat3 = Tensor::zeros(vec![3, 8]);
        assert_eq!(
            tracklet_feature(&wide, &spat3, &store, "feat", 4).unwrap_err(),
            FeatureError::WidthMismatch { got: 9, want: 5 }
        );
        let mut bad = Tensor::zeros(vec![3, 5]);
        bad.data_mut()[0] = f64::NAN;
        assert_eq!(
            tracklet_feature(&bad, &spat3, &store, "feat", 4).unwrap_err(),
            FeatureError::NonFinite
        );
    }

    #[test]
    fn extractor_gradients_match_finite_differences() {
        let store = tiny_store(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let app = xavier(&mut rng, 5, 5);
        let spat = xavier(&mut rng, 5, 8);

        let run = |s: &ParamStore| {
            let tape = Tape::new();
            let bound = Bound::bind(&tape, s);
            let a = tape.constant(app.clone());
            let sp = tape.constant(spat.clone());
            let (seq, pooled) = tracklet_feature_vars(&tape, &bound, "feat", a, sp, 4);
            let joined = tape.concat_cols(&[tape.reshape(seq, vec![1, 30]), pooled]);
            let l = tape.mean(joined);
            (tape, bound, l)
        };
        let (tape, bound, loss) = run(&store);
        let analytic = bound.collect_grads(&tape.backward(loss), &store);
        let numeric = central_diff_grads(&store, 1e-5, |s| {
            let (tape, _, l) = run(s);
            tape.item(l)
        });
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-6, "feature gradient mismatch: {err}");
    }
}
