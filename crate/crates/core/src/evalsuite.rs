//! Evaluation metrics: label overlap and group-level t statistics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::util::ordered_sum;
use crate::volume::{BrainMask, GridShape, LabelVolume, ScalarVolume};

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// `None` when the label is absent from both volumes.
    pub per_label: Vec<(u32, Option<f64>)>,
    /// Mean over the labels that were scored.
    pub mean: f64,
}

/// Per-label Dice overlap `2|A∩B| / (|A| + |B|)`.
pub fn dice(a: &LabelVolume, b: &LabelVolume, labels: &[u32]) -> Result<DiceReport> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidConfig("no labels requested".into()));
    }
    let per_label: Vec<(u32, Option<f64>)> = labels
        .iter()
        .map(|&k| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.labels().iter().zip(b.labels()) {
                let (ia, ib) = (x == k, y == k);
                na += ia as usize;
                nb += ib as usize;
                both += (ia && ib) as usize;
            }
            let score = (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64);
            (k, score)
        })
        .collect();
    let scored: Vec<f64> = per_label.iter().filter_map(|(_, s)| *s).collect();
    if scored.is_empty() {
        return Err(Error::NoLabelsPresent);
    }
    let mean = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(DiceReport { per_label, mean })
}

/// Standardises the masked voxels with the population mean and std; voxels
/// outside the mask become 0.
pub fn zscore_map(v: &ScalarVolume, mask: Option<&BrainMask>) -> Result<ScalarVolume> {
    let st = crate::volume::volume_stats(v, mask)?;
    if !(st.std > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let inside = |i: usize| mask.is_none_or(|m| m.inside()[i]);
    let data = v
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if inside(i) { (x - st.mean) / st.std } else { 0.0 })
        .collect();
    Ok(ScalarVolume::new(v.shape(), data)?.with_spacing(v.spacing()))
}

/// Voxel-wise one-sample t statistics across subjects.
///
/// Voxels whose values are identical across subjects get `±∞` when the common
/// value is non-zero and 0 otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct TMap {
    pub shape: GridShape,
    pub t: Vec<f64>,
    pub n: usize,
}

pub fn one_sample_tmap(maps: &[ScalarVolume], mask: Option<&BrainMask>) -> Result<TMap> {
    if maps.len() < 2 {
        return Err(Error::TooFewMaps(maps.len()));
    }
    let shape = maps[0].shape();
    for m in &maps[1..] {
        if m.shape() != shape {
            return Err(Error::shape(shape, m.shape()));
        }
    }
    if let Some(m) = mask {
        shape.check_spatial(&m.shape())?;
    }
    let n = maps.len();
    let t = (0..shape.voxels())
        .into_par_iter()
        .map(|i| {
            if mask.is_some_and(|m| !m.inside()[i]) {
                return 0.0;
            }
            // Sorted so the statistic does not depend on subject order.
            let mut xs: Vec<f64> = maps.iter().map(|m| m.data()[i]).collect();
            xs.sort_by(f64::total_cmp);
            one_sample_t(&xs)
        })
        .collect();
    Ok(TMap { shape, t, n })
}

fn one_sample_t(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let s = (ss / (n - 1.0)).sqrt();
    if s == 0.0 {
        return if mean > 0.0 {
            f64::INFINITY
        } else if mean < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
    }
    mean / (s / n.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdReport {
    pub threshold: f64,
    /// Voxels with `t > threshold` (strict).
    pub count: usize,
    pub peak: f64,
}

pub fn threshold_report(tm: &TMap, threshold: f64) -> ThresholdReport {
    let count = tm.t.iter().filter(|&&t| t > threshold).count();
    let peak = tm.t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ThresholdReport { threshold, count, peak }
}

/// Voxels exceeding both thresholds in their respective maps.
pub fn overlap_count(a: &TMap, ta: f64, b: &TMap, tb: f64) -> Result<usize> {
    if a.shape.dims() != b.shape.dims() {
        return Err(Error::shape(a.shape, b.shape));
    }
    Ok(a.t.iter().zip(&b.t).filter(|(&x, &y)| x > ta && y > tb).count())
}

/// Mean of the t values, ignoring infinite sentinels.
pub fn finite_mean(tm: &TMap) -> f64 {
    let finite: Vec<f64> = tm.t.iter().copied().filter(|t| t.is_finite()).collect();
    if finite.is_empty() {
        return 0.0;
    }
    ordered_sum(&finite) / finite.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(v: &[u32]) -> LabelVolume {
        LabelVolume::new(GridShape::new(v.len(), 1, 1).unwrap(), v.to_vec()).unwrap()
    }

    fn scalars(v: &[f64]) -> ScalarVolume {
        ScalarVolume::new(GridShape::new(v.len(), 1, 1).unwrap(), v.to_vec()).unwrap()
    }

    fn tmap(v: &[f64]) -> TMap {
        TMap { shape: GridShape::new(v.len(), 1, 1).unwrap(), t: v.to_vec(), n: 3 }
    }

    #[test]
    fn dice_examples() {
        let a = labels(&[1, 1, 0, 0]);
        assert_eq!(dice(&a, &a, &[1]).unwrap().mean, 1.0);
        assert_eq!(dice(&a, &labels(&[0, 0, 1, 1]), &[1]).unwrap().mean, 0.0);
        assert_eq!(dice(&a, &labels(&[0, 1, 1, 0]), &[1]).unwrap().mean, 0.5);
    }

    #[test]
    fn dice_skips_absent_labels() {
        let a = labels(&[1, 1, 0, 0]);
        let r = dice(&a, &a, &[1, 7]).unwrap();
        assert_eq!(r.per_label, vec![(1, Some(1.0)), (7, None)]);
        assert_eq!(r.mean, 1.0);
        assert!(matches!(dice(&a, &a, &[7]), Err(Error::NoLabelsPresent)));
        assert!(dice(&a, &labels(&[1, 1, 0]), &[1]).is_err());
    }

    #[test]
    fn zscore_examples() {
        let z = zscore_map(&scalars(&[1.0, 2.0, 3.0]), None).unwrap();
        let e = 1.5f64.sqrt();
        for (a, b) in z.data().iter().zip([-e, 0.0, e]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((e - 1.2247).abs() < 1e-4);
        let again = zscore_map(&z, None).unwrap();
        for (a, b) in again.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(zscore_map(&scalars(&[4.0; 5]), None), Err(Error::ZeroVariance)));
    }

    #[test]
    fn tmap_examples() {
        let maps = [scalars(&[1.0, 1.0, 2.0]), scalars(&[2.0, -1.0, 2.0]), scalars(&[3.0, 0.0, 2.0])];
        let tm = one_sample_tmap(&maps, None).unwrap();
        assert!((tm.t[0] - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(tm.t[1], 0.0);
        assert_eq!(tm.t[2], f64::INFINITY);
        assert!(matches!(one_sample_tmap(&maps[..1], None), Err(Error::TooFewMaps(1))));
    }

    #[test]
    fn threshold_examples() {
        let r = threshold_report(&tmap(&[5.0, 4.0, 4.3]), 4.24);
        assert_eq!((r.count, r.peak), (2, 5.0));
        assert_eq!(threshold_report(&tmap(&[5.0, 4.0]), 6.0).count, 0);
        assert_eq!(threshold_report(&tmap(&[0.0; 4]), 0.0).count, 0);
        let s = threshold_report(&tmap(&[f64::INFINITY, f64::NEG_INFINITY]), 1e300);
        assert_eq!(s.count, 1);
    }

    #[test]
    fn overlap_examples() {
        let a = tmap(&[5.0, 1.0, 4.0]);
        assert_eq!(overlap_count(&a, 3.0, &a, 3.0).unwrap(), threshold_report(&a, 3.0).count);
        assert_eq!(overlap_count(&a, 3.0, &tmap(&[0.0, 9.0, 0.0]), 3.0).unwrap(), 0);
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded(
            a in proptest::collection::vec(0u32..4, 30),
            b in proptest::collection::vec(0u32..4, 30),
        ) {
            let (la, lb) = (labels(&a), labels(&b));
            if let (Ok(x), Ok(y)) = (dice(&la, &lb, &[1, 2, 3]), dice(&lb, &la, &[1, 2, 3])) {
                prop_assert_eq!(x.mean, y.mean);
                prop_assert!((0.0..=1.0).contains(&x.mean));
            }
        }

        #[test]
        fn threshold_count_monotone(ts in proptest::collection::vec(-10.0f64..10.0, 1..50), t1 in -12.0f64..12.0, dt in 0.0f64..5.0) {
            let tm = tmap(&ts);
            prop_assert!(threshold_report(&tm, t1 + dt).count <= threshold_report(&tm, t1).count);
        }

        #[test]
        fn tmap_subject_order_invariant(vals in proptest::collection::vec(-3.0f64..3.0, 12), rot in 1usize..4) {
            let maps: Vec<ScalarVolume> = vals.chunks(3).map(scalars).collect();
            let mut shuffled = maps.clone();
            shuffled.rotate_left(rot % maps.len());
            shuffled.swap(0, 1);
            let a = one_sample_tmap(&maps, None).unwrap();
            let b = one_sample_tmap(&shuffled, None).unwrap();
            prop_assert_eq!(a.t, b.t);
        }

        #[test]
        fn zscore_standardises(vals in proptest::collection::vec(-100.0f64..100.0, 3..64)) {
            let v = scalars(&vals);
            prop_assume!(crate::volume::volume_stats(&v, None).unwrap().std > 1e-6);
            let z = zscore_map(&v, None).unwrap();
            let st = crate::volume::volume_stats(&z, None).unwrap();
            prop_assert!(st.mean.abs() < 1e-9);
            prop_assert!((st.std - 1.0).abs() < 1e-9);
        }
    }
}
