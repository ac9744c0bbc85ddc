//! Downstream evaluation: train Logistic Regression and MLP classifiers on a
//! labeled dataset (real or synthetic), score them on the real test set with
//! macro-averaged one-vs-rest AuROC, and emit comparison tables.

use crate::data::LabeledDataset;
use crate::dp;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{backward_batch, forward, Activation, MlpParams};
use crate::rng::RngStream;

/// Which downstream classifier to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    LogisticRegression,
    Mlp,
}

impl ClassifierKind {
    /// Short display name used in tables and CSV.
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassifierKind::LogisticRegression => "LR",
            ClassifierKind::Mlp => "MLP",
        }
    }
}

/// Classifier architecture and training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    /// Hidden width; used by the MLP only.
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl ClassifierSpec {
    /// The pinned Logistic Regression protocol: softmax regression,
    /// lr 0.1, 50 epochs, batch 128.
    pub fn logistic_regression() -> Self {
        ClassifierSpec {
            kind: ClassifierKind::LogisticRegression,
            hidden_dim: 0,
            epochs: 50,
            batch_size: 128,
            lr: 0.1,
        }
    }

    /// The pinned MLP protocol: one relu hidden layer of 128, softmax out,
    /// lr 0.1, 50 epochs, batch 128.
    pub fn mlp() -> Self {
        ClassifierSpec {
            kind: ClassifierKind::Mlp,
            hidden_dim: 128,
            epochs: 50,
            batch_size: 128,
            lr: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Param("classifier batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Param(format!(
                "classifier lr must be positive, got {}",
                self.lr
            )));
        }
        if self.kind == ClassifierKind::Mlp && self.hidden_dim < 1 {
            return Err(Error::Param("MLP hidden_dim must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-class one-vs-rest AuROC plus the macro average. Classes with no
/// positives (or no negatives) in the test set are skipped: their entry is
/// `None` and they do not enter the macro average.
#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    pub per_class: Vec<Option<f64>>,
    pub macro_auroc: f64,
    pub positives_per_class: Vec<usize>,
}

fn distinct_present_classes(labels: &Matrix) -> usize {
    let mut present = vec![false; labels.cols()];
    for r in 0..labels.rows() {
        let c = labels
            .row(r)
            .iter()
            .position(|&v| v == 1.0)
            .expect("one-hot row");
        present[c] = true;
    }
    present.iter().filter(|&&p| p).count()
}

fn shuffled_indices(n: usize, stream: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = stream.below(i + 1);
        idx.swap(i, j);
    }
    idx
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::new(idx.len(), m.cols(), data)
}

/// Trains a classifier with plain minibatch SGD on cross-entropy loss.
/// Deterministic per seed: initialization and every epoch's shuffle come
/// from one stream seeded here.
pub fn train_classifier(
    train: &LabeledDataset,
    spec: &ClassifierSpec,
    seed: u64,
) -> Result<MlpParams> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Param("classifier training set is empty".into()));
    }
    if distinct_present_classes(train.labels()) < 2 {
        return Err(Error::Param(
            "classifier training set must contain at least 2 classes".into(),
        ));
    }
    let dim = train.feature_dim();
    let classes = train.num_classes();
    let mut stream = RngStream::new(seed);
    let mut model = match spec.kind {
        ClassifierKind::LogisticRegression => {
            MlpParams::single_layer(dim, classes, Activation::Softmax, &mut stream)?
        }
        ClassifierKind::Mlp => MlpParams::two_layer(
            dim,
            spec.hidden_dim,
            classes,
            Activation::Relu,
            Activation::Softmax,
            &mut stream,
        )?,
    };

    let n = train.len();
    let no_condition = |rows: usize| Matrix::zeros(rows, 0);
    for _ in 0..spec.epochs {
        let order = shuffled_indices(n, &mut stream);
        for chunk in order.chunks(spec.batch_size) {
            let x = gather_rows(train.images(), chunk)?;
            let y = gather_rows(train.labels(), chunk)?;
            let bs = x.rows() as f64;
            let (p, trace) = forward(&model, &x, &no_condition(x.rows()))?;
            // Mean cross-entropy: dL/dp_c = −y_c / p_c, scaled by 1/bs; the
            // softmax Jacobian in backward reduces this to (p − y)/bs.
            let mut dact = Matrix::zeros(p.rows(), p.cols());
            for r in 0..p.rows() {
                for c in 0..p.cols() {
                    let y_rc = y.get(r, c);
                    if y_rc != 0.0 {
                        dact.set(r, c, -y_rc / p.get(r, c) / bs);
                    }
                }
            }
            let (grad, _) = backward_batch(&model, &trace, &dact)?;
            model = dp::sgd_step(&model, &grad, spec.lr)?;
        }
    }
    Ok(model)
}

/// Softmax class scores for every example.
pub fn predict_scores(model: &MlpParams, images: &Matrix) -> Result<Matrix> {
    let (scores, _) = forward(model, images, &Matrix::zeros(images.rows(), 0))?;
    Ok(scores)
}

/// One-vs-rest AuROC per class from a score matrix: for class `c`, the area
/// under the exact empirical ROC of column `c` with class-`c` rows as
/// positives, trapezoids across tie groups (equivalent to midrank counting).
pub fn auroc_from_scores(scores: &Matrix, labels: &Matrix) -> Result<RocResult> {
    if scores.rows() != labels.rows() {
        return Err(Error::Shape(format!(
            "scores have {} rows, labels {}",
            scores.rows(),
            labels.rows()
        )));
    }
    if scores.cols() != labels.cols() {
        return Err(Error::Shape(format!(
            "scores have {} columns, labels {}",
            scores.cols(),
            labels.cols()
        )));
    }
    if scores.rows() == 0 {
        return Err(Error::Param("cannot score an empty test set".into()));
    }
    let n = scores.rows();
    let classes = scores.cols();
    let mut per_class = Vec::with_capacity(classes);
    let mut positives = Vec::with_capacity(classes);
    for c in 0..classes {
        let is_pos: Vec<bool> = (0..n).map(|r| labels.get(r, c) == 1.0).collect();
        let n_pos = is_pos.iter().filter(|&&p| p).count();
        let n_neg = n - n_pos;
        positives.push(n_pos);
        if n_pos == 0 || n_neg == 0 {
            per_class.push(None);
            continue;
        }
        // Sort by score descending; sweep tie groups, adding one trapezoid
        // per group on the (FP, TP) staircase.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores
                .get(b, c)
                .partial_cmp(&scores.get(a, c))
                .expect("finite scores")
        });
        let mut area = 0.0f64;
        let mut tp_prev = 0.0f64;
        let mut fp_prev = 0.0f64;
        let mut tp = 0.0f64;
        let mut fp = 0.0f64;
        let mut i = 0;
        while i < n {
            let threshold = scores.get(order[i], c);
            while i < n && scores.get(order[i], c) == threshold {
                if is_pos[order[i]] {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                i += 1;
            }
            area += (fp - fp_prev) * (tp_prev + tp) / 2.0;
            tp_prev = tp;
            fp_prev = fp;
        }
        let auc = area / (n_pos as f64 * n_neg as f64);
        if !(0.0..=1.0 + 1e-12).contains(&auc) {
            return Err(Error::Computation(format!(
                "class {c} AUC {auc} fell outside [0,1]"
            )));
        }
        per_class.push(Some(auc.min(1.0)));
    }
    let present: Vec<f64> = per_class.iter().filter_map(|&a| a).collect();
    if present.is_empty() {
        return Err(Error::Param(
            "no class had both positives and negatives in the test set".into(),
        ));
    }
    let macro_auroc = present.iter().sum::<f64>() / present.len() as f64;
    Ok(RocResult {
        per_class,
        macro_auroc,
        positives_per_class: positives,
    })
}

/// Scores the model on a labeled test set: macro one-vs-rest AuROC.
pub fn auroc_ovr(model: &MlpParams, test: &LabeledDataset) -> Result<RocResult> {
    let scores = predict_scores(model, test.images())?;
    auroc_from_scores(&scores, test.labels())
}

/// One evaluated (source × classifier) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub source: String,
    pub classifier: ClassifierKind,
    pub result: RocResult,
    pub seed: u64,
}

/// The full comparison table plus its serializations.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    num_classes: usize,
}

impl EvalTable {
    /// CSV with columns `source, classifier, macro_auroc,
    /// per_class_auroc_0..k, seed`; skipped classes leave empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,classifier,macro_auroc");
        for c in 0..self.num_classes {
            s.push_str(&format!(",per_class_auroc_{c}"));
        }
        s.push_str(",seed\n");
        for row in &self.rows {
            s.push_str(&format!(
                "{},{},{}",
                row.source,
                row.classifier.as_str(),
                row.result.macro_auroc
            ));
            for c in 0..self.num_classes {
                match row.result.per_class.get(c).copied().flatten() {
                    Some(a) => s.push_str(&format!(",{a}")),
                    None => s.push(','),
                }
            }
            s.push_str(&format!(",{}\n", row.seed));
        }
        s
    }

    /// Human-readable aligned table of macro AuROC percentages.
    pub fn to_aligned_text(&self) -> String {
        let src_width = self
            .rows
            .iter()
            .map(|r| r.source.len())
            .chain(["source".len()])
            .max()
            .unwrap_or(6);
        let mut s = format!(
            "{:<src_width$}  {:<10}  {:>12}\n",
            "source", "classifier", "macro AuROC"
        );
        for row in &self.rows {
            s.push_str(&format!(
                "{:<src_width$}  {:<10}  {:>11.2}%\n",
                row.source,
                row.classifier.as_str(),
                row.result.macro_auroc * 100.0
            ));
        }
        s
    }
}

/// Runs the comparison protocol: for every source × classifier cell, train
/// on the source and score on the real test set. The cell seed is
/// `base_seed + classifier index`, so identical sources produce identical
/// rows regardless of their position in the list.
pub fn table1_pipeline(
    sources: &[(String, LabeledDataset)],
    real_test: &LabeledDataset,
    specs: &[ClassifierSpec],
    base_seed: u64,
) -> Result<EvalTable> {
    if sources.is_empty() || specs.is_empty() {
        return Err(Error::Param(
            "evaluation needs at least one source and one classifier spec".into(),
        ));
    }
    for (name, ds) in sources {
        if ds.feature_dim() != real_test.feature_dim()
            || ds.num_classes() != real_test.num_classes()
        {
            return Err(Error::Shape(format!(
                "source `{name}` is {}×{} classes, test set is {}×{}",
                ds.feature_dim(),
                ds.num_classes(),
                real_test.feature_dim(),
                real_test.num_classes()
            )));
        }
    }
    let mut rows = Vec::with_capacity(sources.len() * specs.len());
    for (name, ds) in sources {
        for (ci, spec) in specs.iter().enumerate() {
            let seed = base_seed + ci as u64;
            let model = train_classifier(ds, spec, seed)?;
            let result = auroc_ovr(&model, real_test)?;
            rows.push(EvalRow {
                source: name.clone(),
                classifier: spec.kind,
                result,
                seed,
            });
        }
    }
    Ok(EvalTable {
        rows,
        num_classes: real_test.num_classes(),
    })
}
