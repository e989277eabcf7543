//! Per-class average precision and grouped reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Split, NEGATIVE, POSITIVE};
use crate::error::{Error, Result};

/// AP over entries labelled `1` or `0`, ranked by descending score with ties
/// in index order. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[i8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "average_precision",
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    let mut kept: Vec<usize> = (0..scores.len())
        .filter(|&i| labels[i] == POSITIVE || labels[i] == NEGATIVE)
        .collect();
    // stable sort keeps index order among equal scores
    kept.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in kept.iter().enumerate() {
        if labels[i] == POSITIVE {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqGroup {
    Head,
    Medium,
    Tail,
}

/// Head when a class has at least `head_min` positives, medium from
/// `medium_min`, tail below.
pub fn frequency_groups(labels: &[Vec<i8>], n_classes: usize, head_min: usize, medium_min: usize) -> Result<Vec<FreqGroup>> {
    if medium_min > head_min {
        return Err(Error::Config(format!(
            "medium threshold {medium_min} exceeds head threshold {head_min}"
        )));
    }
    let mut counts = vec![0usize; n_classes];
    for row in labels {
        if row.len() != n_classes {
            return Err(Error::shape("frequency_groups", format!("{} labels, {n_classes} classes", row.len())));
        }
        for (c, &y) in counts.iter_mut().zip(row) {
            if y == POSITIVE {
                *c += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|c| {
            if c >= head_min {
                FreqGroup::Head
            } else if c >= medium_min {
                FreqGroup::Medium
            } else {
                FreqGroup::Tail
            }
        })
        .collect())
}

/// Mean of the defined entries among `members`; `None` when none is defined.
fn group_mean(per_class: &[Option<f64>], members: impl Iterator<Item = usize>) -> (Option<f64>, usize, usize) {
    let (mut sum, mut defined, mut total) = (0.0, 0usize, 0usize);
    for i in members {
        total += 1;
        if let Some(ap) = per_class[i] {
            sum += ap;
            defined += 1;
        }
    }
    ((defined > 0).then(|| sum / defined as f64), defined, total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub ap: Option<f64>,
    pub defined_classes: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub instance_id: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub ap_base: Option<f64>,
    pub ap_novel: Option<f64>,
    pub ap_all: Option<f64>,
    pub group_map: Option<Vec<FreqGroup>>,
    pub groups: Vec<GroupSummary>,
    pub n_instances: usize,
    pub n_classes: usize,
    pub instances: Vec<InstanceScores>,
}

impl ScoreReport {
    pub fn group(&self, name: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("group,ap,defined_classes,classes\n");
        for g in &self.groups {
            let ap = g.ap.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into());
            let _ = writeln!(out, "{},{},{},{}", g.group, ap, g.defined_classes, g.classes);
        }
        out
    }

    /// Writes `report.json` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&json, e))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("summary.csv");
        fs::write(&csv, self.summary_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Per-class AP over instances and its base/novel/all and optional
/// frequency-group means. `scores[n][i]` is instance `n`, class `i`.
pub fn grouped_report(
    ids: &[String],
    scores: &[Vec<f64>],
    labels: &[Vec<i8>],
    split: &Split,
    freq_groups: Option<&[FreqGroup]>,
) -> Result<ScoreReport> {
    let n_classes = split.n_attributes();
    if scores.len() != labels.len() || ids.len() != scores.len() {
        return Err(Error::shape(
            "grouped_report",
            format!("{} ids, {} score rows, {} label rows", ids.len(), scores.len(), labels.len()),
        ));
    }
    for (s, l) in scores.iter().zip(labels) {
        if s.len() != n_classes || l.len() != n_classes {
            return Err(Error::shape(
                "grouped_report",
                format!("row of {} scores / {} labels for {n_classes} classes", s.len(), l.len()),
            ));
        }
    }
    if let Some(g) = freq_groups {
        if g.len() != n_classes {
            return Err(Error::shape("grouped_report", format!("{} frequency groups", g.len())));
        }
    }
    let mut per_class_ap = Vec::with_capacity(n_classes);
    let mut col_s = Vec::with_capacity(scores.len());
    let mut col_l = Vec::with_capacity(scores.len());
    for i in 0..n_classes {
        col_s.clear();
        col_l.clear();
        col_s.extend(scores.iter().map(|r| r[i]));
        col_l.extend(labels.iter().map(|r| r[i]));
        per_class_ap.push(average_precision(&col_s, &col_l)?);
    }
    let mut groups = Vec::new();
    let mut push = |name: &str, members: Vec<usize>| {
        let (ap, defined_classes, classes) = group_mean(&per_class_ap, members.into_iter());
        groups.push(GroupSummary {
            group: name.into(),
            ap,
            defined_classes,
            classes,
        });
        ap
    };
    let ap_all = push("all", (0..n_classes).collect());
    let ap_base = push("base", split.base());
    let ap_novel = push("novel", split.novel());
    if let Some(g) = freq_groups {
        for (name, which) in [("head", FreqGroup::Head), ("medium", FreqGroup::Medium), ("tail", FreqGroup::Tail)] {
            push(name, (0..n_classes).filter(|&i| g[i] == which).collect());
        }
    }
    Ok(ScoreReport {
        per_class_ap,
        ap_base,
        ap_novel,
        ap_all,
        group_map: freq_groups.map(|g| g.to_vec()),
        groups,
        n_instances: scores.len(),
        n_classes,
        instances: ids
            .iter()
            .zip(scores)
            .map(|(id, s)| InstanceScores {
                instance_id: id.clone(),
                scores: s.clone(),
            })
            .collect(),
    })
}
