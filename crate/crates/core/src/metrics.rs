//! Dice scores and the evaluation report.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TabModel;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::synth::mean_voting;
use crate::tensor::Tensor;
use crate::train::{predict, Split};

/// Thresholds averaged by [`soft_dice`].
pub const THRESHOLDS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

fn dice_from_counts(a: usize, b: usize, both: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

/// `2|A ∩ B| / (|A| + |B|)` of two `{0, 1}` maps; two empty maps score 1.
pub fn hard_dice<T: Scalar>(pred: &[T], label: &[T]) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::dim(
            "hard_dice",
            format!("maps have {} and {} pixels", pred.len(), label.len()),
        ));
    }
    let (mut a, mut b, mut both) = (0, 0, 0);
    for (&p, &l) in pred.iter().zip(label) {
        let (p, l) = (p.as_f64(), l.as_f64());
        if !(p == 0.0 || p == 1.0) || !(l == 0.0 || l == 1.0) {
            return Err(Error::Contract(format!("hard_dice needs binary maps, found {p} / {l}")));
        }
        let (p, l) = (p == 1.0, l == 1.0);
        a += p as usize;
        b += l as usize;
        both += (p && l) as usize;
    }
    Ok(dice_from_counts(a, b, both))
}

/// Mean over [`THRESHOLDS`] of the hard Dice between `pred >= t` and
/// `label >= t`.
pub fn soft_dice<T: Scalar>(pred: &[T], label: &[T]) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::dim(
            "soft_dice",
            format!("maps have {} and {} pixels", pred.len(), label.len()),
        ));
    }
    let mut counts = [(0usize, 0usize, 0usize); THRESHOLDS.len()];
    for (&p, &l) in pred.iter().zip(label) {
        let (p, l) = (p.as_f64(), l.as_f64());
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&l) {
            return Err(Error::Contract(format!("soft_dice needs values in [0, 1], found {p} / {l}")));
        }
        for (c, &t) in counts.iter_mut().zip(&THRESHOLDS) {
            let (pb, lb) = (p >= t, l >= t);
            c.0 += pb as usize;
            c.1 += lb as usize;
            c.2 += (pb && lb) as usize;
        }
    }
    Ok(counts.iter().map(|&(a, b, both)| dice_from_counts(a, b, both)).sum::<f64>() / THRESHOLDS.len() as f64)
}

/// Scores in percent, each averaged over the images of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_annotator_soft_dice: Vec<f64>,
    pub average: f64,
    pub mean_voting: f64,
    pub thresholds: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    /// Builds the report from per-image scores in `[0, 1]`:
    /// `per_image[i] = (meta vs mean voting, [annotator r vs y_r])`.
    pub fn from_scores(per_image: &[(f64, Vec<f64>)], seed: u64, config_hash: String) -> Result<Self> {
        let Some((_, first)) = per_image.first() else {
            return Err(Error::Data("no samples to evaluate".into()));
        };
        let r = first.len();
        let n = per_image.len() as f64;
        let mut per = vec![0.0; r];
        let mut mv = 0.0;
        for (m, a) in per_image {
            mv += m;
            for (acc, v) in per.iter_mut().zip(a) {
                *acc += v;
            }
        }
        let per: Vec<f64> = per.iter().map(|s| 100.0 * s / n).collect();
        let average = per.iter().sum::<f64>() / r as f64;
        Ok(Self {
            per_annotator_soft_dice: per,
            average,
            mean_voting: 100.0 * mv / n,
            thresholds: THRESHOLDS.to_vec(),
            samples: per_image.len(),
            seed,
            config_hash,
        })
    }

    pub fn header(annotators: usize) -> String {
        let mut s = String::new();
        for r in 1..=annotators {
            s += &format!("{:>8}", format!("A{r}"));
        }
        s + &format!("{:>9}{:>13}", "Average", "Mean Voting")
    }

    /// One aligned row: `A1 .. AR  Average  Mean Voting`.
    pub fn row(&self) -> String {
        let mut s = String::new();
        for v in &self.per_annotator_soft_dice {
            s += &format!("{v:>8.2}");
        }
        s + &format!("{:>9.2}{:>13.2}", self.average, self.mean_voting)
    }

    pub fn table(&self) -> String {
        format!("{}\n{}\n", Self::header(self.per_annotator_soft_dice.len()), self.row())
    }
}

/// Report plus the predicted foreground area (`p >= 0.5`) of every row of
/// every image, `areas[i][0]` being the meta prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub areas: Vec<Vec<usize>>,
}

/// Scores the model's `sigmoid(mu)` maps on `split`: row 0 against the mean
/// voting map, row `r` against annotator `r`.
pub fn evaluate<T: Scalar>(
    model: &TabModel,
    ps: &ParamStore<T>,
    split: &Split<T>,
    batch_size: usize,
    seed: u64,
    config_hash: String,
) -> Result<Evaluation> {
    let r = model.config.annotators;
    evaluate_with(split, r, batch_size, seed, config_hash, |idx| {
        let (images, _) = split.batch(idx)?;
        Ok(predict(model, ps, &images)?.probs)
    })
}

/// Scores arbitrary probability maps. `probs_for(indices)` returns
/// `[B, R+1, H, W]` for those samples of `split`.
pub fn evaluate_with<T: Scalar>(
    split: &Split<T>,
    annotators: usize,
    batch_size: usize,
    seed: u64,
    config_hash: String,
    mut probs_for: impl FnMut(&[usize]) -> Result<Tensor<T>>,
) -> Result<Evaluation> {
    let r = annotators;
    if let Some(m) = split.masks.first() {
        if m.shape()[0] != r {
            return Err(Error::Config(format!(
                "model has {r} annotators but the data has {}",
                m.shape()[0]
            )));
        }
    }
    let mut scores = Vec::with_capacity(split.len());
    let mut areas = Vec::with_capacity(split.len());
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let probs = probs_for(chunk)?;
        let s = probs.shape();
        if s.len() != 4 || s[0] != chunk.len() || s[1] != r + 1 {
            return Err(Error::dim(
                "evaluate",
                format!("expected [{}, {}, H, W] predictions, got {s:?}", chunk.len(), r + 1),
            ));
        }
        let hw = s[2] * s[3];
        for (j, &i) in chunk.iter().enumerate() {
            let rows = &probs.data()[j * (r + 1) * hw..(j + 1) * (r + 1) * hw];
            let masks = split.masks[i].data();
            if masks.len() != r * hw {
                return Err(Error::shapes("evaluate", split.masks[i].shape(), &s[1..]));
            }
            let per_mask: Vec<Tensor<T>> = (0..r)
                .map(|a| Tensor::new(&[hw], masks[a * hw..(a + 1) * hw].to_vec()))
                .collect::<Result<_>>()?;
            let mv = mean_voting(&per_mask)?;
            let meta = soft_dice(&rows[..hw], mv.data())?;
            let per = (0..r)
                .map(|a| soft_dice(&rows[(a + 1) * hw..(a + 2) * hw], per_mask[a].data()))
                .collect::<Result<Vec<_>>>()?;
            scores.push((meta, per));
            areas.push(
                (0..=r)
                    .map(|a| rows[a * hw..(a + 1) * hw].iter().filter(|v| v.as_f64() >= 0.5).count())
                    .collect(),
            );
        }
    }
    Ok(Evaluation {
        report: MetricsReport::from_scores(&scores, seed, config_hash)?,
        areas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_dice_cases() {
        let a = [1.0f64, 1.0, 0.0, 0.0];
        assert_eq!(hard_dice(&a, &a).unwrap(), 1.0);
        assert_eq!(hard_dice(&a, &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(hard_dice(&[0.0f32; 3], &[0.0; 3]).unwrap(), 1.0);
        let x = [1.0f64, 1.0, 1.0, 1.0, 0.0, 0.0];
        let y = [0.0f64, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(hard_dice(&x, &y).unwrap(), 0.5);
        assert!(matches!(hard_dice(&[0.5f64], &[1.0]), Err(Error::Contract(_))));
        assert!(hard_dice(&[1.0f64], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn soft_dice_cases() {
        let l = [1.0f64, 0.0, 1.0, 0.0];
        assert_eq!(soft_dice(&l, &l).unwrap(), 1.0);
        assert_eq!(soft_dice(&[0.0, 1.0, 0.0, 1.0], &l).unwrap(), 0.0);
        assert!((soft_dice(&[0.6f64; 4], &[1.0; 4]).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(soft_dice(&[1.2f64], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn report_average_and_table() {
        let scores = [(1.0, vec![1.0, 0.5]), (0.5, vec![0.0, 0.5])];
        let r = MetricsReport::from_scores(&scores, 1, "h".into()).unwrap();
        assert_eq!(r.per_annotator_soft_dice, vec![50.0, 50.0]);
        assert_eq!(r.average, 50.0);
        assert_eq!(r.mean_voting, 75.0);
        let t = r.table();
        assert!(t.starts_with("      A1      A2  Average  Mean Voting"));
        assert!(MetricsReport::from_scores(&[], 0, String::new()).is_err());
    }
}
