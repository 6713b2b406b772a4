use std::fmt::Write as _;

use super::metrics::{mae_rmse, ArpMetrics};
use super::stats::{pearson, spearman_rho, Correlation};
use super::EvalError;

/// Significance level behind the report stars.
pub const STAR_LEVEL: f64 = 0.01;

/// Per-source split of clips around the mean annoyance μ.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceAnnoyanceRow {
    pub source: String,
    pub class: usize,
    /// Clips containing the source with annoyance ≤ μ.
    pub n_low: usize,
    pub n_high: usize,
    pub n_total: usize,
    /// `P(x ≤ μ | s_i) = n_low / N_i`.
    pub p_low: f64,
    /// `1 − p_low`.
    pub p_high: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilitySplit {
    pub mu: f64,
    pub rows: Vec<SourceAnnoyanceRow>,
    /// Sources with no clips.
    pub omitted: Vec<String>,
}

/// Counts, for every source, clips at or below the mean annoyance and above it.
pub fn annoyance_probability_split(
    labels: &[Vec<bool>],
    annoyance: &[f64],
    names: &[&str],
) -> Result<ProbabilitySplit, EvalError> {
    if labels.is_empty() || labels.len() != annoyance.len() {
        return Err(EvalError::Input(format!(
            "{} label rows for {} ratings",
            labels.len(),
            annoyance.len()
        )));
    }
    if labels.iter().any(|l| l.len() != names.len()) {
        return Err(EvalError::Input("label width differs from source list".into()));
    }
    let mu = annoyance.iter().sum::<f64>() / annoyance.len() as f64;
    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    for (k, &name) in names.iter().enumerate() {
        let (mut lo, mut hi) = (0usize, 0usize);
        for (l, &a) in labels.iter().zip(annoyance) {
            if l[k] {
                if a <= mu {
                    lo += 1;
                } else {
                    hi += 1;
                }
            }
        }
        let n = lo + hi;
        if n == 0 {
            omitted.push(name.to_string());
            continue;
        }
        let p_low = lo as f64 / n as f64;
        rows.push(SourceAnnoyanceRow {
            source: name.to_string(),
            class: k,
            n_low: lo,
            n_high: hi,
            n_total: n,
            p_low,
            p_high: 1.0 - p_low,
        });
    }
    Ok(ProbabilitySplit { mu, rows, omitted })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table5Row {
    pub split: SourceAnnoyanceRow,
    /// Spearman between predicted source probability and predicted annoyance.
    pub model: Option<Correlation>,
    /// Pearson between predicted source probability and clip L_Aeq.
    pub level: Option<Correlation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table5Report {
    pub mu: f64,
    pub rows: Vec<Table5Row>,
    pub notes: Vec<String>,
}

/// Inputs of [`table5_report`], one entry per test clip.
pub struct Table5Input<'a> {
    pub names: &'a [&'a str],
    pub pred_probs: &'a [Vec<f64>],
    pub pred_annoyance: &'a [f64],
    pub labels: &'a [Vec<bool>],
    pub annoyance: &'a [f64],
    pub laeq_db: &'a [f64],
}

pub fn table5_report(input: &Table5Input<'_>) -> Result<Table5Report, EvalError> {
    let n = input.labels.len();
    if [
        input.pred_probs.len(),
        input.pred_annoyance.len(),
        input.annoyance.len(),
        input.laeq_db.len(),
    ]
    .iter()
    .any(|&m| m != n)
    {
        return Err(EvalError::Input("per-clip inputs differ in length".into()));
    }
    let split = annoyance_probability_split(input.labels, input.annoyance, input.names)?;
    let mut notes: Vec<String> = split
        .omitted
        .iter()
        .map(|s| format!("{s}: absent from every clip, row omitted"))
        .collect();
    let mut rows = Vec::new();
    for row in split.rows {
        let probs: Vec<f64> = input.pred_probs.iter().map(|p| p[row.class]).collect();
        let (model, level) = if n >= 3 {
            (
                spearman_rho(&probs, input.pred_annoyance)?,
                pearson(&probs, input.laeq_db)?,
            )
        } else {
            (None, None)
        };
        if model.is_none() {
            notes.push(format!("{}: model correlation undefined", row.source));
        }
        rows.push(Table5Row {
            split: row,
            model,
            level,
        });
    }
    Ok(Table5Report {
        mu: split.mu,
        rows,
        notes,
    })
}

fn star(c: &Option<Correlation>) -> &'static str {
    match c {
        Some(c) if c.p < STAR_LEVEL => "*",
        _ => "",
    }
}

fn fmt_r(c: &Option<Correlation>) -> String {
    c.map_or_else(|| "NA".into(), |c| format!("{:.3}{}", c.r, star(&Some(c))))
}

impl Table5Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,model_r,model_p,p_low,p_high,n_low,n_high,n_total,level_r,level_p\n");
        let f = |c: &Option<Correlation>| {
            c.map_or_else(
                || ("".to_string(), "".to_string()),
                |c| (format!("{:.6}", c.r), format!("{:.6e}", c.p)),
            )
        };
        for r in &self.rows {
            let (mr, mp) = f(&r.model);
            let (lr, lp) = f(&r.level);
            let _ = writeln!(
                s,
                "{},{mr},{mp},{:.6},{:.6},{},{},{},{lr},{lp}",
                r.split.source, r.split.p_low, r.split.p_high, r.split.n_low, r.split.n_high, r.split.n_total
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mean annoyance mu = {:.3}", self.mu);
        let _ = writeln!(
            s,
            "{:<20} {:>9} {:>8} {:>8} {:>6} {:>9}",
            "source", "model r", "P(<=mu)", "P(>mu)", "N", "level r"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>9} {:>8.3} {:>8.3} {:>6} {:>9}",
                r.split.source,
                fmt_r(&r.model),
                r.split.p_low,
                r.split.p_high,
                r.split.n_total,
                fmt_r(&r.level)
            );
        }
        let _ = writeln!(s, "* p < {STAR_LEVEL}");
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Least squares fit of annoyance on level, scored on the test points.
pub fn laeq_linear_regression(
    train_levels: &[f64],
    train_annoyance: &[f64],
    test_levels: &[f64],
    test_annoyance: &[f64],
) -> Result<(LinearFit, ArpMetrics), EvalError> {
    if train_levels.len() != train_annoyance.len() || train_levels.len() < 2 {
        return Err(EvalError::Input("need at least 2 paired training points".into()));
    }
    let n = train_levels.len() as f64;
    let mx = train_levels.iter().sum::<f64>() / n;
    let my = train_annoyance.iter().sum::<f64>() / n;
    let sxx: f64 = train_levels.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(EvalError::Degenerate("training levels are constant".into()));
    }
    let sxy: f64 = train_levels
        .iter()
        .zip(train_annoyance)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let slope = sxy / sxx;
    let fit = LinearFit {
        slope,
        intercept: my - slope * mx,
    };
    let pred: Vec<f64> = test_levels.iter().map(|&x| fit.predict(x)).collect();
    Ok((fit, mae_rmse(&pred, test_annoyance)?))
}

/// Mean annoyance of the `k` training points nearest in level; ties go to
/// the earlier training point.
pub fn knn_predict(train_levels: &[f64], train_annoyance: &[f64], x: f64, k: usize) -> f64 {
    let mut idx: Vec<usize> = (0..train_levels.len()).collect();
    idx.sort_by(|&a, &b| {
        (train_levels[a] - x)
            .abs()
            .total_cmp(&(train_levels[b] - x).abs())
            .then(a.cmp(&b))
    });
    idx[..k].iter().map(|&i| train_annoyance[i]).sum::<f64>() / k as f64
}

pub fn laeq_knn(
    train_levels: &[f64],
    train_annoyance: &[f64],
    test_levels: &[f64],
    test_annoyance: &[f64],
    k: usize,
) -> Result<ArpMetrics, EvalError> {
    if train_levels.is_empty() || train_levels.len() != train_annoyance.len() {
        return Err(EvalError::Input("empty or unpaired training set".into()));
    }
    if k == 0 || k > train_levels.len() {
        return Err(EvalError::Input(format!(
            "k = {k} with {} training points",
            train_levels.len()
        )));
    }
    let pred: Vec<f64> = test_levels
        .iter()
        .map(|&x| knn_predict(train_levels, train_annoyance, x, k))
        .collect();
    mae_rmse(&pred, test_annoyance)
}
