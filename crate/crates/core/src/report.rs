//! Evaluation reports: one text table per metric plus line-delimited JSON
//! records. Both renderings are deterministic functions of the report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluate::{ConversionReport, DisentanglementReport};
use crate::metrics::{compare_systems, Comparison, ScoreTable};
use crate::tts::TtsScores;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub system: String,
    pub n: usize,
    pub wer_analog: Option<f64>,
    pub secs: Option<f64>,
    pub f0_corr: Option<f64>,
    pub probe_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub metric: String,
    pub a: String,
    pub b: String,
    pub mean_diff: f64,
    /// `None` when every paired difference is identical.
    pub t: Option<f64>,
    pub p: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub disentanglement: Option<DisentanglementReport>,
    pub conversion: Option<ConversionReport>,
    pub systems: Vec<SystemRow>,
    pub tests: Vec<PairTest>,
}

impl EvalReport {
    pub fn add_disentanglement(&mut self, d: &DisentanglementReport) {
        self.systems.push(SystemRow {
            system: "speaker embedding".into(),
            n: d.speakers,
            probe_accuracy: Some(d.embedding_probe),
            ..SystemRow::default()
        });
        self.systems.push(SystemRow {
            system: "non-speaker codes".into(),
            n: d.speakers,
            probe_accuracy: Some(d.code_probe),
            ..SystemRow::default()
        });
        self.systems.push(SystemRow {
            system: "chance".into(),
            n: d.speakers,
            probe_accuracy: Some(d.chance),
            ..SystemRow::default()
        });
        self.disentanglement = Some(d.clone());
    }

    pub fn add_conversion(&mut self, c: &ConversionReport) {
        self.systems.push(SystemRow {
            system: "SSVC conversion".into(),
            n: c.pairs,
            wer_analog: Some(c.wer_converted),
            secs: Some(c.secs_to_target),
            f0_corr: Some(c.f0_to_source),
            ..SystemRow::default()
        });
        self.systems.push(SystemRow {
            system: "SSVC reconstruction".into(),
            n: c.pairs,
            wer_analog: Some(c.wer_reconstructed),
            ..SystemRow::default()
        });
        self.systems.push(SystemRow {
            system: "conversion vs source".into(),
            n: c.pairs,
            secs: Some(c.secs_to_source),
            f0_corr: Some(c.f0_to_other),
            ..SystemRow::default()
        });
        self.conversion = Some(c.clone());
    }

    /// Adds TTS systems and paired tests between every two of them.
    pub fn add_tts(&mut self, scores: &[TtsScores]) -> Result<()> {
        for s in scores {
            self.systems.push(SystemRow {
                system: s.system.clone(),
                n: s.wer.len(),
                wer_analog: Some(s.mean_wer()),
                secs: Some(s.mean_secs()),
                ..SystemRow::default()
            });
        }
        for (i, a) in scores.iter().enumerate() {
            for b in &scores[i + 1..] {
                self.tests.push(pair_test("wer_analog", a, b, &a.wer, &b.wer)?);
                self.tests.push(pair_test("secs", a, b, &a.secs, &b.secs)?);
            }
        }
        Ok(())
    }

    pub fn system(&self, name: &str) -> Option<&SystemRow> {
        self.systems.iter().find(|r| r.system == name)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let metrics: [(&str, fn(&SystemRow) -> Option<f64>); 4] = [
            ("wer_analog", |r| r.wer_analog),
            ("secs", |r| r.secs),
            ("f0_corr", |r| r.f0_corr),
            ("probe_accuracy", |r| r.probe_accuracy),
        ];
        for (name, get) in metrics {
            let rows: Vec<_> = self.systems.iter().filter_map(|r| get(r).map(|v| (r, v))).collect();
            if rows.is_empty() {
                continue;
            }
            let width = rows.iter().map(|(r, _)| r.system.len()).max().unwrap().max(6);
            let _ = writeln!(out, "== {name} ==");
            let _ = writeln!(out, "{:<width$}  {:>6}  {:>10}", "system", "n", name);
            for (r, v) in rows {
                let _ = writeln!(out, "{:<width$}  {:>6}  {:>10.4}", r.system, r.n, v);
            }
            out.push('\n');
        }
        if !self.tests.is_empty() {
            let width = self
                .tests
                .iter()
                .map(|t| t.a.len() + t.b.len() + 4)
                .max()
                .unwrap();
            let _ = writeln!(out, "== paired t-tests ==");
            let _ = writeln!(
                out,
                "{:<12}  {:<width$}  {:>10}  {:>9}  {:>8}",
                "metric", "pair", "mean_diff", "t", "p"
            );
            for t in &self.tests {
                let pair = format!("{} vs {}", t.a, t.b);
                let tv = t.t.map_or("-".to_string(), |v| format!("{v:.4}"));
                let _ = writeln!(
                    out,
                    "{:<12}  {:<width$}  {:>10.4}  {:>9}  {:>8.4}",
                    t.metric, pair, t.mean_diff, tv, t.p
                );
            }
        }
        out
    }

    pub fn render_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        line(serde_json::json!({"kind": "run", "seed": self.seed}));
        if let Some(d) = &self.disentanglement {
            line(serde_json::json!({"kind": "disentanglement", "value": d}));
        }
        if let Some(c) = &self.conversion {
            line(serde_json::json!({"kind": "conversion", "value": c}));
        }
        for r in &self.systems {
            line(serde_json::json!({"kind": "system", "value": r}));
        }
        for t in &self.tests {
            line(serde_json::json!({"kind": "ttest", "value": t}));
        }
        out
    }
}

fn pair_test(metric: &str, a: &TtsScores, b: &TtsScores, xa: &[f64], xb: &[f64]) -> Result<PairTest> {
    compare(metric, &a.system, &b.system, xa, xb)
}

fn compare(metric: &str, a: &str, b: &str, xa: &[f64], xb: &[f64]) -> Result<PairTest> {
    let (mean_diff, t, p) = match compare_systems(xa, xb)? {
        Comparison::Tested(t) => (t.mean_diff, Some(t.t), t.p),
        Comparison::NoDifference { mean_diff } => (mean_diff, None, if mean_diff == 0.0 { 1.0 } else { 0.0 }),
    };
    Ok(PairTest {
        metric: metric.to_string(),
        a: a.to_string(),
        b: b.to_string(),
        mean_diff,
        t,
        p,
    })
}

/// Listening-test summary: per-system mean score and paired t-tests
/// between every two systems.
pub fn mushra_report(table: &ScoreTable) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (name, scores) in table.systems.iter().zip(&table.scores) {
        report.systems.push(SystemRow {
            system: name.clone(),
            n: scores.len(),
            ..SystemRow::default()
        });
    }
    for i in 0..table.systems.len() {
        for j in i + 1..table.systems.len() {
            report.tests.push(compare(
                "mushra",
                &table.systems[i],
                &table.systems[j],
                &table.scores[i],
                &table.scores[j],
            )?);
        }
    }
    Ok(report)
}

pub fn render_mushra(table: &ScoreTable, report: &EvalReport) -> String {
    let mut out = String::new();
    let width = table.systems.iter().map(|s| s.len()).max().unwrap_or(0).max(6);
    let _ = writeln!(out, "== mushra ==");
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>8}", "system", "n", "mean");
    for (name, scores) in table.systems.iter().zip(&table.scores) {
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>8.2}", name, scores.len(), mean);
    }
    out.push('\n');
    let tests = EvalReport {
        tests: report.tests.clone(),
        ..EvalReport::default()
    };
    out.push_str(&tests.render_text());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(name: &str, wer: Vec<f64>) -> TtsScores {
        TtsScores {
            system: name.into(),
            secs: vec![0.5; wer.len()],
            wer,
            stopped: 0,
            failed: 0,
        }
    }

    #[test]
    fn tables_and_records() {
        let mut r = EvalReport { seed: 3, ..Default::default() };
        r.add_tts(&[scores("a", vec![0.1, 0.2, 0.4]), scores("b", vec![0.3, 0.3, 0.9])])
            .unwrap();
        let text = r.render_text();
        assert!(text.contains("== wer_analog =="));
        assert!(text.contains("== paired t-tests =="));
        assert!(!text.contains("== f0_corr =="));
        let lines: Vec<_> = r.render_jsonl().lines().map(String::from).collect();
        assert_eq!(lines.len(), 1 + 2 + 2);
        for l in &lines {
            serde_json::from_str::<serde_json::Value>(l).unwrap();
        }
        // identical secs columns: no t statistic, p = 1
        let secs = r.tests.iter().find(|t| t.metric == "secs").unwrap();
        assert_eq!((secs.t, secs.p), (None, 1.0));
    }
}
