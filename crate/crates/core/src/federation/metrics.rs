//! Test-set evaluation and the metrics sink (JSON lines, summary CSV,
//! final checkpoint).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::experiment::RoundReport;
use super::{FederationError, Model};
use crate::autodiff::{write_checkpoint, ParamStore, Tape};
use crate::synthdata::Sample;
use crate::tensor::TensorError;

/// Hard Dice `2|P∩G| / (|P| + |G|)` of one class; both masks empty scores 1.
pub fn dice_score(predicted: &[usize], truth: &[usize], class_id: usize) -> f64 {
    let (mut both, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in predicted.iter().zip(truth) {
        let (in_p, in_g) = (a == class_id, b == class_id);
        p += in_p as usize;
        g += in_g as usize;
        both += (in_p && in_g) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

fn argmax_labels(logits: &[f64], classes: usize, hw: usize) -> Vec<usize> {
    (0..hw)
        .map(|pos| {
            (1..classes).fold(0, |best, c| {
                if logits[c * hw + pos] > logits[best * hw + pos] {
                    c
                } else {
                    best
                }
            })
        })
        .collect()
}

/// Per-domain foreground Dice: for every test image the mean over
/// foreground classes, averaged over the domain's images.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    test_sets: &[&[Sample]],
    checked: bool,
) -> Result<Vec<f64>, TensorError> {
    let classes = model.net.class_count();
    test_sets
        .iter()
        .map(|samples| {
            let mut total = 0.0;
            for sample in samples.iter() {
                let mut tape = Tape::new(checked);
                let image = tape.constant(sample.image.clone())?;
                let (logits, _) = model.net.forward(&mut tape, params, image)?;
                let hw = sample.labels.height() * sample.labels.width();
                let predicted = argmax_labels(tape.value(logits).data(), classes, hw);
                let per_class: f64 = (1..classes)
                    .map(|c| dice_score(&predicted, sample.labels.classes(), c))
                    .sum();
                total += per_class / (classes - 1) as f64;
            }
            Ok(total / samples.len().max(1) as f64)
        })
        .collect()
}

/// Streams round reports to `rounds.jsonl` and evaluated rounds to
/// `summary.csv`; writes `final.fbcs` at the end.
pub struct MetricsSink {
    dir: PathBuf,
    rounds: BufWriter<File>,
    summary: csv::Writer<File>,
}

impl MetricsSink {
    pub fn create(dir: &Path, domain_count: usize) -> Result<Self, FederationError> {
        fs::create_dir_all(dir)?;
        let rounds = BufWriter::new(File::create(dir.join("rounds.jsonl"))?);
        let mut summary = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_error)?;
        let mut header = vec!["round".to_string()];
        header.extend((0..domain_count).map(|d| format!("dice_d{d}")));
        header.push("avg_dice".into());
        summary.write_record(&header).map_err(csv_error)?;
        Ok(MetricsSink {
            dir: dir.to_path_buf(),
            rounds,
            summary,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record(&mut self, report: &RoundReport) -> Result<(), FederationError> {
        serde_json::to_writer(&mut self.rounds, report).map_err(std::io::Error::other)?;
        self.rounds.write_all(b"\n")?;
        self.rounds.flush()?;
        if let (Some(domains), Some(avg)) = (&report.domain_dice, report.avg_dice) {
            let mut row = vec![report.round.to_string()];
            row.extend(domains.iter().map(|d| format!("{d:.6}")));
            row.push(format!("{avg:.6}"));
            self.summary.write_record(&row).map_err(csv_error)?;
            self.summary.flush()?;
        }
        Ok(())
    }

    pub fn finish(self, params: &ParamStore) -> Result<PathBuf, FederationError> {
        let path = self.dir.join("final.fbcs");
        write_checkpoint(params, BufWriter::new(File::create(&path)?))?;
        Ok(path)
    }
}

fn csv_error(e: csv::Error) -> FederationError {
    FederationError::Io(std::io::Error::other(e))
}
