//! Aggregation of best validation losses over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::run::RunRecord;
use crate::decay::DecayMode;
use crate::error::{Error, Result};

/// Means that agree at this many decimals are all flagged best.
pub const TIE_DECIMALS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: String,
    pub mode: DecayMode,
    pub lambda_base: f64,
    pub runs: usize,
    pub mean_best_val_loss: f64,
    pub std_best_val_loss: f64,
    pub total_runtime_s: f64,
    pub flagged_best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    Some((mean, (ss / (n - 1.0)).sqrt()))
}

fn mode_rank(m: DecayMode) -> usize {
    DecayMode::ALL.iter().position(|&x| x == m).unwrap_or(usize::MAX)
}

/// Groups by (config, mode, lambda_base) and flags the lowest mean within
/// each (config, lambda_base) row.
pub fn summarize(records: &[RunRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Summary("no run records to summarize".into()));
    }
    let mut groups: BTreeMap<(String, u64, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        if !r.best_val_loss.is_finite() {
            return Err(Error::Summary(format!(
                "record {} / {} / seed {} has a non-finite best loss",
                r.config, r.mode, r.seed
            )));
        }
        groups
            .entry((r.config.clone(), r.lambda_base.to_bits(), mode_rank(r.mode)))
            .or_default()
            .push(r);
    }

    let mut rows: Vec<SummaryRow> = groups
        .into_values()
        .map(|rs| {
            let losses: Vec<f64> = rs.iter().map(|r| r.best_val_loss).collect();
            let (mean, std) = mean_std(&losses).expect("groups are non-empty");
            SummaryRow {
                config: rs[0].config.clone(),
                mode: rs[0].mode,
                lambda_base: rs[0].lambda_base,
                runs: rs.len(),
                mean_best_val_loss: mean,
                std_best_val_loss: std,
                total_runtime_s: rs.iter().map(|r| r.total_time_s).sum(),
                flagged_best: false,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.config
            .cmp(&b.config)
            .then(a.lambda_base.total_cmp(&b.lambda_base))
            .then(mode_rank(a.mode).cmp(&mode_rank(b.mode)))
    });

    let mut start = 0;
    while start < rows.len() {
        let end = start
            + rows[start..]
                .iter()
                .take_while(|r| r.config == rows[start].config && r.lambda_base == rows[start].lambda_base)
                .count();
        let best = rows[start..end]
            .iter()
            .map(|r| fixed(r.mean_best_val_loss))
            .min_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()))
            .expect("non-empty row");
        for r in &mut rows[start..end] {
            r.flagged_best = fixed(r.mean_best_val_loss) == best;
        }
        start = end;
    }
    Ok(Summary { rows })
}

fn fixed(v: f64) -> String {
    format!("{v:.TIE_DECIMALS$}")
}

impl Summary {
    pub fn rows(&self) -> &[SummaryRow] {
        &self.rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s =
            String::from("config,mode,lambda_base,mean_best_val_loss,std_best_val_loss,flagged_best\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.config, r.mode, r.lambda_base, r.mean_best_val_loss, r.std_best_val_loss, r.flagged_best
            )
            .expect("writing to a String");
        }
        fs::write(path, s)?;
        Ok(())
    }

    /// One line per (config, lambda_base), one column per mode, cells
    /// `mean ± std` with a `*` on the best.
    pub fn render_table(&self) -> String {
        let modes: Vec<DecayMode> = DecayMode::ALL
            .into_iter()
            .filter(|m| self.rows.iter().any(|r| r.mode == *m))
            .collect();
        let mut keys: Vec<(&str, f64)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|&(c, l)| c == r.config && l == r.lambda_base) {
                keys.push((&r.config, r.lambda_base));
            }
        }
        let header: Vec<String> = ["config".to_string(), "lambda_base".to_string()]
            .into_iter()
            .chain(modes.iter().map(|m| m.to_string()))
            .collect();
        let mut lines = vec![header];
        for (config, lambda) in keys {
            let mut line = vec![config.to_string(), format!("{lambda:e}")];
            for m in &modes {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.config == config && r.lambda_base == lambda && r.mode == *m)
                    .map(|r| {
                        format!(
                            "{} ± {}{}",
                            fixed(r.mean_best_val_loss),
                            fixed(r.std_best_val_loss),
                            if r.flagged_best { " *" } else { "" }
                        )
                    })
                    .unwrap_or_else(|| "-".into());
                line.push(cell);
            }
            lines.push(line);
        }
        let cols = lines[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            out.push_str(cells.join(" | ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                out.push_str(&rule.join("-|-"));
                out.push('\n');
            }
        }
        out
    }
}

/// Collects every `record.json` below `dir`.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    if !dir.is_dir() {
        return Err(Error::Summary(format!("{} is not a directory", dir.display())));
    }
    let mut records = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Summary(e.to_string()))?;
        if entry.file_type().is_file() && entry.file_name() == "record.json" {
            let text = fs::read_to_string(entry.path())?;
            records.push(serde_json::from_str(&text)?);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(config: &str, mode: DecayMode, lambda: f64, seed: u64, best: f64) -> RunRecord {
        RunRecord {
            config: config.into(),
            mode,
            lambda_base: lambda,
            seed,
            epochs: Vec::new(),
            best_val_loss: best,
            best_epoch: 1,
            final_train_acc: 0.0,
            steps: 0,
            total_time_s: 1.0,
            tick_timings: Vec::new(),
            oui_trace: Vec::new(),
            lambda_trace: Vec::new(),
        }
    }

    #[test]
    fn three_seed_stats() {
        let rs: Vec<_> = [1.0, 1.1, 1.2]
            .iter()
            .zip(1..)
            .map(|(&b, s)| record("c", DecayMode::Fixed, 1e-4, s, b))
            .collect();
        let s = summarize(&rs).unwrap();
        assert_eq!(s.rows.len(), 1);
        let r = &s.rows[0];
        assert!((r.mean_best_val_loss - 1.1).abs() < 1e-12);
        assert!((r.std_best_val_loss - 0.1).abs() < 1e-12);
        assert_eq!(fixed(r.mean_best_val_loss), "1.10");
        assert_eq!(fixed(r.std_best_val_loss), "0.10");
    }

    #[test]
    fn single_record_std_zero() {
        let s = summarize(&[record("c", DecayMode::OuiDecay, 1e-4, 1, 0.7)]).unwrap();
        assert_eq!(s.rows[0].std_best_val_loss, 0.0);
        assert!(s.rows[0].flagged_best);
        assert!(s.render_table().contains("0.70 ± 0.00 *"));
    }

    #[test]
    fn ties_flag_both() {
        let rs = vec![
            record("r50", DecayMode::Fixed, 1e-2, 1, 1.031),
            record("r50", DecayMode::AdaDecay, 1e-2, 1, 1.05),
            record("r50", DecayMode::OuiDecay, 1e-2, 1, 1.029),
            record("r50", DecayMode::Fixed, 5e-2, 1, 1.2),
            record("r50", DecayMode::OuiDecay, 5e-2, 1, 1.1),
        ];
        let s = summarize(&rs).unwrap();
        let flags: Vec<(DecayMode, f64, bool)> =
            s.rows.iter().map(|r| (r.mode, r.lambda_base, r.flagged_best)).collect();
        assert_eq!(
            flags,
            vec![
                (DecayMode::Fixed, 1e-2, true),
                (DecayMode::AdaDecay, 1e-2, false),
                (DecayMode::OuiDecay, 1e-2, true),
                (DecayMode::Fixed, 5e-2, false),
                (DecayMode::OuiDecay, 5e-2, true),
            ]
        );
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(summarize(&[]), Err(Error::Summary(_))));
    }
}
