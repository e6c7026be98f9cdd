use rand::seq::SliceRandom;
use rand::Rng;

use super::KoopmanError;
use crate::diffcore::Tensor;

/// A contiguous stretch of one trajectory as seen by the remote learner.
///
/// Row `k` of `states` is the sampled state at step `k`, zeroed when the
/// uplink dropped it. Row `k` of `controls` is the force applied between
/// steps `k` and `k + 1`; the controller computed it, so it is always known.
/// `starts` marks the delivered rows that this batch may use as loss
/// samples, which is how train and validation splits share one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    states: Tensor,
    controls: Tensor,
    delivered: Vec<bool>,
    starts: Vec<bool>,
}

impl Batch {
    pub fn new(states: &[Vec<f64>], controls: &[Vec<f64>], delivered: &[bool]) -> Result<Self, KoopmanError> {
        let t = states.len();
        if t == 0 {
            return Err(KoopmanError::Data("no samples".into()));
        }
        if controls.len() != t || delivered.len() != t {
            return Err(KoopmanError::Data(format!(
                "{t} states, {} controls and {} delivery flags",
                controls.len(),
                delivered.len()
            )));
        }
        let kept: Vec<Vec<f64>> = states
            .iter()
            .zip(delivered)
            .map(|(s, d)| if *d { s.clone() } else { vec![0.0; s.len()] })
            .collect();
        let states = Tensor::from_rows(&kept).map_err(|e| KoopmanError::Data(e.to_string()))?;
        let controls = Tensor::from_rows(controls).map_err(|e| KoopmanError::Data(e.to_string()))?;
        if !states.is_finite() || !controls.is_finite() {
            return Err(KoopmanError::Data("non-finite sample".into()));
        }
        Ok(Self {
            states,
            controls,
            delivered: delivered.to_vec(),
            starts: delivered.to_vec(),
        })
    }

    /// Every sample delivered.
    pub fn fully_delivered(states: &[Vec<f64>], controls: &[Vec<f64>]) -> Result<Self, KoopmanError> {
        Self::new(states, controls, &vec![true; states.len()])
    }

    pub fn len(&self) -> usize {
        self.delivered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delivered.is_empty()
    }

    pub fn states(&self) -> &Tensor {
        &self.states
    }

    pub fn controls(&self) -> &Tensor {
        &self.controls
    }

    pub fn delivered(&self) -> &[bool] {
        &self.delivered
    }

    pub fn starts(&self) -> &[bool] {
        &self.starts
    }

    pub fn delivered_count(&self) -> usize {
        self.delivered.iter().filter(|d| **d).count()
    }

    pub fn first_delivered(&self) -> Option<Vec<f64>> {
        let k = self.delivered.iter().position(|d| *d)?;
        Some(self.states.row_slice(k).to_vec())
    }

    /// Same data restricted to the given loss samples.
    pub fn with_starts(&self, starts: &[bool]) -> Result<Self, KoopmanError> {
        if starts.len() != self.len() {
            return Err(KoopmanError::Data("start mask length mismatch".into()));
        }
        let mut out = self.clone();
        out.starts = starts.iter().zip(&self.delivered).map(|(s, d)| *s && *d).collect();
        Ok(out)
    }

    /// Random split of the delivered samples; `fraction` of them (at least
    /// one when there are two or more) go to the second batch.
    pub fn split<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<(Self, Self), KoopmanError> {
        let mut idx: Vec<usize> = (0..self.len()).filter(|k| self.starts[*k]).collect();
        if idx.len() < 2 {
            return Err(KoopmanError::EmptyBatch("train/validation split"));
        }
        idx.shuffle(rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        let mut val = vec![false; self.len()];
        for &k in &idx[..n_val] {
            val[k] = true;
        }
        let train: Vec<bool> = self.starts.iter().zip(&val).map(|(s, v)| *s && !*v).collect();
        Ok((self.with_starts(&train)?, self.with_starts(&val)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize) -> Batch {
        let states: Vec<Vec<f64>> = (0..n).map(|k| vec![k as f64 + 1.0; 4]).collect();
        let controls: Vec<Vec<f64>> = (0..n).map(|k| vec![k as f64]).collect();
        let delivered: Vec<bool> = (0..n).map(|k| k % 3 != 1).collect();
        Batch::new(&states, &controls, &delivered).unwrap()
    }

    #[test]
    fn dropped_rows_are_zeroed_and_controls_kept() {
        let b = batch(6);
        assert_eq!(b.states().row_slice(1), &[0.0; 4]);
        assert_eq!(b.states().row_slice(2), &[3.0; 4]);
        assert_eq!(b.controls().row_slice(1), &[1.0]);
        assert_eq!(b.delivered_count(), 4);
        assert_eq!(b.first_delivered(), Some(vec![1.0; 4]));
    }

    #[test]
    fn split_partitions_the_delivered_rows() {
        let b = batch(30);
        let (train, val) = b.split(0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let n_val = val.starts().iter().filter(|s| **s).count();
        assert_eq!(n_val, 4);
        for k in 0..b.len() {
            assert!(!(train.starts()[k] && val.starts()[k]));
            assert_eq!(train.starts()[k] || val.starts()[k], b.delivered()[k]);
        }
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let err = Batch::new(&vec![vec![0.0; 4]; 3], &vec![vec![0.0]; 2], &[true; 3]).unwrap_err();
        assert!(err.to_string().contains("3 states, 2 controls"));
        assert!(Batch::new(&[], &[], &[]).is_err());
        assert!(batch(3).with_starts(&[true]).is_err());
    }
}
