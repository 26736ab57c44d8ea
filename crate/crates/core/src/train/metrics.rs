use std::fmt;

/// Confusion matrix and the accuracies derived from it. Classes are
/// 0-based here.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<u64>>,
    pub oa: f64,
    /// Mean recall over classes that occur in the truth.
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class, `None` for classes absent from the truth.
    pub per_class_acc: Vec<Option<f64>>,
    pub flops_per_sample: u64,
    /// Optional display names, one per class.
    pub class_names: Vec<String>,
}

impl EvalReport {
    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Self {
        assert_eq!(truth.len(), pred.len(), "truth and prediction lengths differ");
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(pred) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let per_class_acc: Vec<Option<f64>> = (0..k)
            .map(|i| (rows[i] > 0).then(|| confusion[i][i] as f64 / rows[i] as f64))
            .collect();
        let present: Vec<f64> = per_class_acc.iter().flatten().copied().collect();
        let (oa, aa, kappa) = if total == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let n = total as f64;
            let po = trace as f64 / n;
            let pe = rows.iter().zip(&cols).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (n * n);
            let kappa = if pe < 1.0 { (po - pe) / (1.0 - pe) } else if po == 1.0 { 1.0 } else { 0.0 };
            (po, present.iter().sum::<f64>() / present.len() as f64, kappa)
        };
        Self {
            confusion,
            oa,
            aa,
            kappa,
            per_class_acc,
            flops_per_sample: 0,
            class_names: Vec::new(),
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<4} {:<24} {:>7} {:>9}", "#", "class", "samples", "acc(%)")?;
        for (i, acc) in self.per_class_acc.iter().enumerate() {
            let name = self.class_names.get(i).cloned().unwrap_or_else(|| format!("class {}", i + 1));
            let n: u64 = self.confusion[i].iter().sum();
            match acc {
                Some(a) => writeln!(f, "{:<4} {:<24} {:>7} {:>9.2}", i + 1, name, n, 100.0 * a)?,
                None => writeln!(f, "{:<4} {:<24} {:>7} {:>9}", i + 1, name, n, "-")?,
            }
        }
        writeln!(f, "OA(%)    {:.2}", 100.0 * self.oa)?;
        writeln!(f, "AA(%)    {:.2}", 100.0 * self.aa)?;
        write!(f, "Kappa(%) {:.2}", 100.0 * self.kappa)?;
        if self.flops_per_sample > 0 {
            write!(f, "\nFLOPs/sample {}", self.flops_per_sample)?;
        }
        Ok(())
    }
}
