//! AUC-ROC, average precision and the annotation-budget sweep harness.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

/// Class probabilities with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub scores: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ScoreSet {
    pub fn new(scores: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if scores.nrows() != labels.len() || scores.ncols() != num_classes {
            return Err(Error::param(format!(
                "scores {:?} do not match {} labels x {} classes",
                scores.dim(),
                labels.len(),
                num_classes
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::param(format!("label {l} outside {num_classes} classes")));
        }
        for row in scores.rows() {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::param("score rows must be probability distributions"));
            }
        }
        Ok(ScoreSet { scores, labels, num_classes })
    }

    /// Binary AUC on the positive-class column, or macro AUC for K > 2.
    pub fn auc(&self) -> Result<f64> {
        if self.num_classes == 2 {
            let pos: Vec<f64> = self.scores.column(1).to_vec();
            auc_roc(&pos, &self.labels)
        } else {
            macro_auc(&self.scores, &self.labels, self.num_classes)
        }
    }
}

/// Counts (negatives below, ties) per distinct score level, sorted ascending.
fn tie_groups(scores: &[f64], positive: &[bool]) -> Result<Vec<(usize, usize)>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::param("scores contain NaN"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups = Vec::new();
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        let (mut p, mut n) = (0, 0);
        while k < idx.len() && scores[idx[k]] == s {
            if positive[idx[k]] {
                p += 1
            } else {
                n += 1
            }
            k += 1;
        }
        groups.push((p, n));
    }
    Ok(groups)
}

/// Mann–Whitney AUC of `scores` for the positive class `1`; ties count 1/2.
pub fn auc_roc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::param("scores and labels differ in length"));
    }
    let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    auc_binary(scores, &positive)
}

/// AUC with an explicit positive mask.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    // twice the Mann-Whitney U, kept integral so the result is exact
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for (p, n) in tie_groups(scores, positive)? {
        twice_u += 2 * p as u128 * neg_below + (p as u128) * (n as u128);
        neg_below += n as u128;
    }
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Unweighted mean of one-vs-rest AUCs over `k` classes.
pub fn macro_auc(scores: &Array2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::param("macro AUC needs at least 2 classes"));
    }
    if scores.ncols() != k || scores.nrows() != labels.len() {
        return Err(Error::param("score matrix shape does not match labels/classes"));
    }
    let mut total = 0.0;
    for c in 0..k {
        if !labels.contains(&c) {
            return Err(Error::UndefinedMetric(format!("class {c} absent from labels")));
        }
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += auc_binary(&scores.column(c).to_vec(), &positive)?;
    }
    Ok(total / k as f64)
}

/// Area under the precision-recall curve with step interpolation:
/// `Σ (R_k − R_{k−1}) P_k` over descending score thresholds.
pub fn average_precision(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive sample".into()));
    }
    let mut groups = tie_groups(scores, &positive)?;
    groups.reverse();
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    for (p, n) in groups {
        tp += p;
        fp += n;
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub auc: Option<f64>,
    pub error: Option<String>,
}

/// One row-cell of the budget table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetResult {
    pub method: String,
    pub budget: f64,
    pub per_seed: Vec<SeedOutcome>,
    pub mean: f64,
    pub std: f64,
}

impl BudgetResult {
    pub fn from_outcomes(method: &str, budget: f64, per_seed: Vec<SeedOutcome>) -> Self {
        let ok: Vec<f64> = per_seed.iter().filter_map(|o| o.auc).collect();
        let (mean, std) = mean_std(&ok);
        BudgetResult { method: method.to_string(), budget, per_seed, mean, std }
    }

    pub fn aucs(&self) -> Vec<f64> {
        self.per_seed.iter().filter_map(|o| o.auc).collect()
    }

    pub fn failed(&self) -> usize {
        self.per_seed.iter().filter(|o| o.auc.is_none()).count()
    }
}

/// Runs `cell(budget, seed)` for every pair and aggregates per budget.
/// A failing cell is recorded, not propagated.
pub fn budget_sweep<F>(method: &str, budgets: &[f64], seeds: &[u64], exec: Exec, cell: F) -> Result<Vec<BudgetResult>>
where
    F: Fn(f64, u64) -> Result<f64> + Sync + Send,
{
    if seeds.is_empty() {
        return Err(Error::config("budget sweep needs at least one seed"));
    }
    if let Some(b) = budgets.iter().find(|&&b| !(b > 0.0 && b <= 1.0)) {
        return Err(Error::config(format!("budget {b} outside (0, 1]")));
    }
    let cells: Vec<(f64, u64)> = budgets.iter().flat_map(|&b| seeds.iter().map(move |&s| (b, s))).collect();
    let outcomes = exec.map(&cells, |&(b, s)| match cell(b, s) {
        Ok(auc) => SeedOutcome { seed: s, auc: Some(auc), error: None },
        Err(e) => SeedOutcome { seed: s, auc: None, error: Some(e.to_string()) },
    });
    Ok(budgets
        .iter()
        .enumerate()
        .map(|(i, &b)| BudgetResult::from_outcomes(method, b, outcomes[i * seeds.len()..(i + 1) * seeds.len()].to_vec()))
        .collect())
}

fn pct(b: f64) -> String {
    let p = b * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}%", p.round())
    } else {
        format!("{p}%")
    }
}

/// Methods as rows, budgets as columns, cells `mean ± std` in AUC percent.
pub fn render_table(results: &[BudgetResult]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut budgets: Vec<f64> = Vec::new();
    for r in results {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !budgets.iter().any(|&b| b == r.budget) {
            budgets.push(r.budget);
        }
    }
    let cell = |m: &str, b: f64| {
        results
            .iter()
            .find(|r| r.method == m && r.budget == b)
            .map(|r| {
                if r.aucs().is_empty() {
                    "failed".to_string()
                } else {
                    let mut s = format!("{:.1} ± {:.1}", 100.0 * r.mean, 100.0 * r.std);
                    if r.failed() > 0 {
                        s.push_str(&format!(" ({} failed)", r.failed()));
                    }
                    s
                }
            })
            .unwrap_or_else(|| "-".into())
    };
    let mut rows = vec![std::iter::once("method".to_string()).chain(budgets.iter().map(|&b| pct(b))).collect::<Vec<_>>()];
    for m in &methods {
        rows.push(std::iter::once(m.to_string()).chain(budgets.iter().map(|&b| cell(m, b))).collect());
    }
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap()).collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let pad = widths[c] - v.chars().count();
                if c == 0 {
                    format!("{v}{}", " ".repeat(pad))
                } else {
                    format!("{}{v}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
        }
    }
    let _ = writeln!(out, "AUC-ROC (%) as mean ± population std over seeds.");
    out
}

/// One JSON object per (method, budget, seed) cell plus one summary object
/// per (method, budget).
pub fn records_jsonl(results: &[BudgetResult]) -> String {
    let mut out = String::new();
    for r in results {
        for o in &r.per_seed {
            let v = serde_json::json!({
                "kind": "cell", "method": r.method, "budget": r.budget,
                "seed": o.seed, "auc": o.auc, "error": o.error,
            });
            let _ = writeln!(out, "{v}");
        }
        let v = serde_json::json!({
            "kind": "summary", "method": r.method, "budget": r.budget,
            "mean": if r.mean.is_finite() { Some(r.mean) } else { None },
            "std": if r.std.is_finite() { Some(r.std) } else { None },
            "n": r.aucs().len(),
        });
        let _ = writeln!(out, "{v}");
    }
    out
}

/// AUC-vs-budget curves, one polyline per method, as an SVG document.
pub fn render_svg_plot(results: &[BudgetResult], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 60.0;
    const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
    let mut budgets: Vec<f64> = results.iter().map(|r| r.budget).collect();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    let finite: Vec<f64> = results.iter().filter(|r| r.mean.is_finite()).flat_map(|r| [r.mean - r.std, r.mean + r.std]).collect();
    let lo = finite.iter().copied().fold(1.0, f64::min).clamp(0.0, 1.0);
    let hi = finite.iter().copied().fold(0.0, f64::max).clamp(0.0, 1.0);
    let (lo, hi) = if hi - lo < 0.05 { ((lo - 0.025).max(0.0), (hi + 0.025).min(1.0)) } else { (lo, hi) };
    let (lo, hi) = if hi <= lo { (0.0, 1.0) } else { (lo, hi) };
    let x_of = |b: f64| {
        let i = budgets.iter().position(|&v| v == b).unwrap_or(0) as f64;
        let n = (budgets.len().max(2) - 1) as f64;
        M + i / n * (W - 2.0 * M)
    };
    let y_of = |a: f64| H - M - (a - lo) / (hi - lo) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    for &b in &budgets {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x_of(b), H - M + 18.0, pct(b));
    }
    for k in 0..=4 {
        let a = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.1}</text>"#, M - 6.0, y_of(a) + 4.0, 100.0 * a);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">annotation budget</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">AUC-ROC (%)</text>"#, H / 2.0, H / 2.0);
    let mut methods: Vec<&str> = Vec::new();
    for r in results {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for (i, m) in methods.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts: Vec<(f64, f64)> = results
            .iter()
            .filter(|r| r.method == *m && r.mean.is_finite())
            .map(|r| (r.budget, r.mean))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|&(b, a)| format!("{:.1},{:.1}", x_of(b), y_of(a))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(b, a) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x_of(b), y_of(a));
        }
        let ly = M + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - M - 110.0, W - M - 90.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, W - M - 84.0, ly + 4.0, xml_escape(m));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn separated_and_inverted() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(auc_roc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc_roc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        let s = Array2::from_shape_vec((2, 3), vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        assert!(matches!(macro_auc(&s, &[0, 1], 3), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn fifty_random_samples_match_pairwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let scores: Vec<f64> = (0..50).map(|_| (rng.random::<f64>() * 10.0).round() / 10.0).collect();
        let mut labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        assert!((auc_roc(&scores, &labels).unwrap() - brute_force_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn macro_of_two_classes_is_mean_of_both_views() {
        let p1 = [0.2, 0.7, 0.4, 0.9, 0.55];
        let labels = [0, 1, 0, 1, 0];
        let s = Array2::from_shape_fn((5, 2), |(i, k)| if k == 1 { p1[i] } else { 1.0 - p1[i] });
        let a1 = auc_roc(&p1, &labels).unwrap();
        let neg: Vec<f64> = p1.iter().map(|p| 1.0 - p).collect();
        let inv: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
        let a0 = auc_roc(&neg, &inv).unwrap();
        assert!((macro_auc(&s, &labels, 2).unwrap() - (a0 + a1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn average_precision_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        // ranking: pos, neg, pos -> 1/2 * 1 + 1/2 * 2/3
        let ap = average_precision(&[0.9, 0.5, 0.1], &[1, 0, 1]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[0.8, 0.82, 0.84]);
        assert!((m - 0.82).abs() < 1e-12);
        assert!((s - 0.016329931618554516).abs() < 1e-12);
        assert!((s - 0.0163).abs() < 1e-4);
        assert_eq!(mean_std(&[0.7]).1, 0.0);
    }

    #[test]
    fn sweep_records_failures_without_aborting() {
        let res = budget_sweep("m", &[0.5, 1.0], &[1, 2, 3], Exec::Parallel, |b, s| {
            if s == 2 && b < 1.0 {
                Err(Error::data("boom"))
            } else {
                Ok(b * 0.5 + s as f64 * 0.01)
            }
        })
        .unwrap();
        assert_eq!(res.len(), 2);
        assert_eq!(res[0].failed(), 1);
        assert_eq!(res[0].aucs().len(), 2);
        assert!((res[1].mean - 0.52).abs() < 1e-12);
        let table = render_table(&res);
        assert!(table.contains("(1 failed)"));
        assert!(budget_sweep("m", &[0.0], &[1], Exec::Sequential, |_, _| Ok(0.5)).is_err());
        assert!(budget_sweep("m", &[0.5], &[], Exec::Sequential, |_, _| Ok(0.5)).is_err());
    }

    #[test]
    fn table_has_one_row_per_method() {
        let r = vec![BudgetResult::from_outcomes("jigmag", 0.01, vec![SeedOutcome { seed: 0, auc: Some(0.816), error: None }])];
        let t = render_table(&r);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("jigmag") && lines[2].contains("81.6 ± 0.0"));
        assert!(render_svg_plot(&r, "t").starts_with("<svg"));
        assert_eq!(records_jsonl(&r).lines().count(), 2);
    }

    proptest! {
        #[test]
        fn fast_auc_equals_pairwise(
            data in proptest::collection::vec((0u8..20, 0usize..2), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
            let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let fast = auc_roc(&scores, &labels).unwrap();
            prop_assert!((fast - brute_force_auc(&scores, &labels)).abs() < 1e-12);
            let inv: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
            prop_assert!((fast + auc_roc(&scores, &inv).unwrap() - 1.0).abs() < 1e-12);
            let mono: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(fast, auc_roc(&mono, &labels).unwrap());
        }
    }
}
