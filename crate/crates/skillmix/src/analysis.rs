//! Routing profiles and report files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use skillmix_core::corpus::{Skill, SkillInstance, Vocabulary};
use skillmix_core::encoder::RoutingMode;
use skillmix_core::tape::Tape;
use skillmix_core::Model;

use crate::error::{AppError, AppResult};
use crate::io::atomic_write;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingProfile {
    pub task: String,
    pub skills: Vec<String>,
    /// `[depth][n_skills]` router weights averaged over the set.
    pub mean_weights: Vec<Vec<f64>>,
    /// `[depth][n_skills]` fraction of instances that activated each skill.
    pub activation_rate: Vec<Vec<f64>>,
    /// `[instance][step]` active skill indices.
    pub traces: Vec<Vec<Vec<usize>>>,
}

impl RoutingProfile {
    pub fn depth(&self) -> usize {
        self.mean_weights.len()
    }

    /// Skill with the largest mean weight at `step` (lowest index on ties).
    pub fn argmax(&self, step: usize) -> usize {
        argmax(&self.mean_weights[step], None)
    }

    /// As [`RoutingProfile::argmax`], leaving out one skill (typically the
    /// shared "general" label).
    pub fn argmax_excluding(&self, step: usize, skip: usize) -> usize {
        argmax(&self.mean_weights[step], Some(skip))
    }

    /// Mean weight of `skills` summed per step, then averaged over steps.
    pub fn mass(&self, skills: &[usize]) -> f64 {
        let per_step: Vec<f64> = self
            .mean_weights
            .iter()
            .map(|row| skills.iter().map(|&j| row[j]).sum())
            .collect();
        per_step.iter().sum::<f64>() / per_step.len().max(1) as f64
    }
}

fn argmax(row: &[f64], skip: Option<usize>) -> usize {
    let mut best: Option<usize> = None;
    for (j, &w) in row.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        if best.is_none_or(|b| w > row[b]) {
            best = Some(j);
        }
    }
    best.unwrap_or(0)
}

pub fn skill_names(n_skills: usize) -> Vec<String> {
    (0..n_skills)
        .map(|j| match (n_skills == Skill::ALL.len(), Skill::from_index(j)) {
            (true, Some(s)) => s.name().to_string(),
            _ => format!("skill{j}"),
        })
        .collect()
}

/// Encodes the set in learned-routing mode and averages router weights per step.
pub fn extract_routing(
    model: &Model,
    vocab: &Vocabulary,
    task: &str,
    instances: &[SkillInstance],
    batch: usize,
) -> AppResult<RoutingProfile> {
    if vocab.len() != model.config.vocab_size {
        return Err(skillmix_core::Error::Validation(format!(
            "vocabulary of {} tokens does not match the model's {}",
            vocab.len(),
            model.config.vocab_size
        ))
        .into());
    }
    if instances.is_empty() {
        return Err(AppError::Usage(format!("no instances to analyse for `{task}`")));
    }
    let (depth, n) = (model.config.depth, model.config.n_skills);
    let mut sums = vec![vec![0.0; n]; depth];
    let mut counts = vec![vec![0usize; n]; depth];
    let mut traces = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch.max(1)) {
        let inputs: Vec<Vec<usize>> = chunk.iter().map(|i| vocab.tokenize(&i.input)).collect();
        let mut tape = Tape::inference(&model.store);
        let state = model.encode(&mut tape, &inputs, &RoutingMode::Learned)?;
        for i in 0..chunk.len() {
            let mut trace = Vec::with_capacity(depth);
            for (s, step) in state.steps.iter().enumerate() {
                let d = &step.decisions[i];
                for j in 0..n {
                    sums[s][j] += d.weights[j];
                }
                for &j in &d.active {
                    counts[s][j] += 1;
                }
                trace.push(d.active.clone());
            }
            traces.push(trace);
        }
    }
    let total = instances.len() as f64;
    Ok(RoutingProfile {
        task: task.to_string(),
        skills: skill_names(n),
        mean_weights: sums.into_iter().map(|r| r.into_iter().map(|x| x / total).collect()).collect(),
        activation_rate: counts
            .into_iter()
            .map(|r| r.into_iter().map(|c| c as f64 / total).collect())
            .collect(),
        traces,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub schema_version: u32,
    pub profiles: Vec<RoutingProfile>,
    pub metrics: BTreeMap<String, f64>,
}

/// `task,step,skill,mean_weight,activation_rate`, one row per task × step × skill.
pub fn routing_csv(profiles: &[RoutingProfile]) -> String {
    let mut s = String::from("task,step,skill,mean_weight,activation_rate\n");
    for p in profiles {
        for (step, (w, a)) in p.mean_weights.iter().zip(&p.activation_rate).enumerate() {
            for (j, name) in p.skills.iter().enumerate() {
                s.push_str(&format!("{},{},{},{},{}\n", p.task, step + 1, name, w[j], a[j]));
            }
        }
    }
    s
}

/// Writes `routing.csv` and `routing.json` into `dir`.
pub fn emit_report(profiles: &[RoutingProfile], metrics: &BTreeMap<String, f64>, dir: &Path) -> AppResult<()> {
    atomic_write(&dir.join("routing.csv"), routing_csv(profiles).as_bytes())?;
    let report = RoutingReport {
        schema_version: REPORT_SCHEMA_VERSION,
        profiles: profiles.to_vec(),
        metrics: metrics.clone(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report always serializes");
    atomic_write(&dir.join("routing.json"), json.as_bytes())
}

pub fn load_report(path: &Path) -> AppResult<RoutingReport> {
    let text = crate::io::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| AppError::format(path, e.to_string()))
}
