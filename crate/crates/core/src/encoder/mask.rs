use rand::seq::SliceRandom;
use rand::Rng;

/// Masked frame positions of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted, unique, all `< T`.
    pub positions: Vec<usize>,
    pub span_length: usize,
    pub mask_rate: f64,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Samples span starts without replacement until at least `mask_rate · T`
/// positions are covered. Overlapping spans merge; at least one span is
/// always placed, and no span runs past the end of the utterance.
pub fn plan_mask<R: Rng>(
    num_frames: usize,
    mask_rate: f64,
    span_length: usize,
    rng: &mut R,
) -> MaskPlan {
    assert!(num_frames >= 1, "cannot mask an empty utterance");
    assert!(
        mask_rate > 0.0 && mask_rate < 1.0,
        "mask_rate must lie in (0, 1), got {mask_rate}"
    );
    assert!(
        (1..=num_frames).contains(&span_length),
        "span_length {span_length} outside [1, {num_frames}]"
    );
    let mut starts: Vec<usize> = (0..=num_frames - span_length).collect();
    starts.shuffle(rng);
    let target = mask_rate * num_frames as f64;
    let mut covered = vec![false; num_frames];
    let mut count = 0usize;
    for s in starts {
        for c in &mut covered[s..s + span_length] {
            if !*c {
                *c = true;
                count += 1;
            }
        }
        if count as f64 >= target {
            break;
        }
    }
    MaskPlan {
        positions: (0..num_frames).filter(|&i| covered[i]).collect(),
        span_length,
        mask_rate,
    }
}
