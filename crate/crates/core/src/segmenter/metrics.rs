use serde::Serialize;

/// Square confusion counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    /// Adds `n` to one cell.
    pub fn add_count(&mut self, truth: usize, pred: usize, n: u64) {
        self.counts[truth * self.classes + pred] += n;
    }

    /// Counts every pair whose label is not `ignore`.
    pub fn add_all(&mut self, truth: &[usize], pred: &[usize], ignore: usize) {
        for (&t, &p) in truth.iter().zip(pred) {
            if t != ignore {
                self.add(t, p);
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }

    /// `TP / (TP + FP + FN)`; `None` when the class appears in neither the
    /// labels nor the predictions.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let fn_: u64 = (0..self.classes).map(|p| self.get(class, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|t| self.get(t, class)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// Mean IoU over the classes present.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = (0..self.classes).filter_map(|c| self.iou(c)).collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            pixel_accuracy: self.pixel_accuracy(),
            per_class_iou: (0..self.classes).map(|c| self.iou(c)).collect(),
            miou: self.miou(),
            pixels: self.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub pixel_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Non-ignored pixels counted.
    pub pixels: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_disjoint_predictions() {
        let labels = [0, 1, 2, 2, 1, 0];
        let mut m = ConfusionMatrix::new(3);
        m.add_all(&labels, &labels, 255);
        assert_eq!(m.miou(), 1.0);
        assert_eq!(m.pixel_accuracy(), 1.0);
        let mut m = ConfusionMatrix::new(3);
        m.add_all(&labels, &labels.map(|l| (l + 1) % 3), 255);
        assert_eq!(m.miou(), 0.0);
        assert_eq!(m.pixel_accuracy(), 0.0);
    }

    #[test]
    fn crafted_counts() {
        // class 0: TP 3, FP 1, FN 1; class 1: TP 2, FP 0, FN 2
        let mut m = ConfusionMatrix::new(3);
        m.add_count(0, 0, 3);
        m.add_count(2, 0, 1);
        m.add_count(0, 2, 1);
        m.add_count(1, 1, 2);
        m.add_count(1, 2, 2);
        assert!((m.iou(0).unwrap() - 0.6).abs() < 1e-15);
        assert!((m.iou(1).unwrap() - 0.5).abs() < 1e-15);
        let two_class = (m.iou(0).unwrap() + m.iou(1).unwrap()) / 2.0;
        assert!((two_class - 0.55).abs() < 1e-15);
    }

    #[test]
    fn ignored_pixels_are_skipped() {
        let mut m = ConfusionMatrix::new(2);
        m.add_all(&[0, 255, 1], &[0, 1, 0], 255);
        assert_eq!(m.total(), 2);
        assert_eq!(m.iou(1), Some(0.0));
    }

    proptest! {
        #[test]
        fn matches_brute_force(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let (truth, pred): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let mut m = ConfusionMatrix::new(4);
            m.add_all(&truth, &pred, 255);
            let correct = pairs.iter().filter(|(t, p)| t == p).count();
            prop_assert!((m.pixel_accuracy() - correct as f64 / pairs.len() as f64).abs() < 1e-12);
            let mut ious = vec![];
            for c in 0..4 {
                let inter = pairs.iter().filter(|&&(t, p)| t == c && p == c).count();
                let union = pairs.iter().filter(|&&(t, p)| t == c || p == c).count();
                if union > 0 {
                    ious.push(inter as f64 / union as f64);
                }
            }
            let want = ious.iter().sum::<f64>() / ious.len() as f64;
            prop_assert!((m.miou() - want).abs() < 1e-12);
        }
    }
}
