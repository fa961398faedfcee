//! Causal validation: interventions on attention heads and their effects.
//!
//! A task case is a context plus the correct next token. Interventions
//! rescale chosen heads' post-gate outputs inside the forward pass (scale 0
//! removes a head, 1 is the identity, up to 1.5 amplifies), and the effect
//! is the change in the correct token's probability at the final position.
//! Suites aggregate per-case deltas into mean and sample deviation; effect
//! matrices cross task suites with head groups; steering sweeps trace the
//! probability as the scale runs from 0 to 1.5.

pub mod synth;

pub use crate::model::InterventionSpec;
use crate::model::Model;
use crate::tensor::kernels;
use crate::{Error, Result};
use std::io::{BufWriter, Write};
use std::path::Path;

/// Task family of a case. The tag has no effect on evaluation; it names
/// suites in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Capitalization,
    Gender,
    Winograd,
    Custom,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Capitalization => "capitalization",
            TaskKind::Gender => "gender",
            TaskKind::Winograd => "winograd",
            TaskKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "capitalization" => Ok(TaskKind::Capitalization),
            "gender" => Ok(TaskKind::Gender),
            "winograd" => Ok(TaskKind::Winograd),
            "custom" => Ok(TaskKind::Custom),
            other => Err(Error::Data(format!("unknown task tag {other:?}"))),
        }
    }
}

/// One evaluation case: a context and the correct continuation token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskCase {
    pub task: TaskKind,
    pub context_ids: Vec<u32>,
    pub correct_id: u32,
    /// Optional contrast token for reporting; evaluation uses correct_id.
    pub incorrect_id: Option<u32>,
}

impl TaskCase {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.context_ids.len() < 2 {
            return Err(Error::Data(format!(
                "case context has {} tokens, need at least 2",
                self.context_ids.len()
            )));
        }
        let check = |id: u32| -> Result<()> {
            if id as usize >= vocab {
                return Err(Error::Data(format!("token id {id} out of range for vocab {vocab}")));
            }
            Ok(())
        };
        for &id in &self.context_ids {
            check(id)?;
        }
        check(self.correct_id)?;
        if let Some(id) = self.incorrect_id {
            check(id)?;
        }
        Ok(())
    }
}

/// Loads a suite file: one case per line,
/// `task<TAB>context_ids(comma-sep)<TAB>correct_id[<TAB>incorrect_id]`.
/// Blank lines are skipped. Errors carry the 1-based line number.
pub fn load_suite(path: &Path, vocab: usize) -> Result<Vec<TaskCase>> {
    let text = std::fs::read_to_string(path)?;
    let mut cases = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Data(format!(
                "suite line {lineno}: expected 3 or 4 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Data(format!("suite line {lineno}: {what}"));
        let task = TaskKind::parse(fields[0]).map_err(|e| bad(&e.to_string()))?;
        let context_ids: Vec<u32> = fields[1]
            .split(',')
            .map(|s| s.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("unparseable context ids"))?;
        let correct_id = fields[2]
            .trim()
            .parse::<u32>()
            .map_err(|_| bad("unparseable correct id"))?;
        let incorrect_id = match fields.get(3) {
            Some(s) => Some(
                s.trim()
                    .parse::<u32>()
                    .map_err(|_| bad("unparseable incorrect id"))?,
            ),
            None => None,
        };
        let case = TaskCase {
            task,
            context_ids,
            correct_id,
            incorrect_id,
        };
        case.validate(vocab).map_err(|e| bad(&e.to_string()))?;
        cases.push(case);
    }
    Ok(cases)
}

/// Writes a suite in the format [`load_suite`] reads.
pub fn save_suite(path: &Path, cases: &[TaskCase]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for c in cases {
        let ids: Vec<String> = c.context_ids.iter().map(|i| i.to_string()).collect();
        write!(w, "{}\t{}\t{}", c.task.as_str(), ids.join(","), c.correct_id)?;
        if let Some(inc) = c.incorrect_id {
            write!(w, "\t{inc}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Probabilities before and after an intervention, and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseResult {
    pub p_baseline: f64,
    pub p_intervened: f64,
    pub delta: f64,
}

fn correct_probability(model: &Model<f64>, case: &TaskCase, spec: Option<&InterventionSpec>) -> Result<f64> {
    let pass = match spec {
        Some(s) => model.forward_with_hooks(&case.context_ids, s)?,
        None => model.forward(&case.context_ids, Default::default())?,
    };
    let tq = case.context_ids.len() - 1;
    let mut probs = pass.logit_row(model.cfg.layers - 1, tq).to_vec();
    kernels::softmax_slice(&mut probs);
    Ok(probs[case.correct_id as usize])
}

/// Evaluates one case. Without a spec the intervened probability is the
/// baseline by construction and delta is exactly 0.
pub fn run_case(model: &Model<f64>, case: &TaskCase, spec: Option<&InterventionSpec>) -> Result<CaseResult> {
    case.validate(model.cfg.vocab)?;
    let p_baseline = correct_probability(model, case, None)?;
    let p_intervened = match spec {
        Some(s) => correct_probability(model, case, Some(s))?,
        None => p_baseline,
    };
    Ok(CaseResult {
        p_baseline,
        p_intervened,
        delta: p_intervened - p_baseline,
    })
}

/// Suite-level delta statistics. Deviations use the n-1 denominator; a
/// single case reports deviation 0.
#[derive(Debug, Clone)]
pub struct SuiteStats {
    pub mean_delta: f64,
    pub std_delta: f64,
    pub results: Vec<CaseResult>,
}

impl SuiteStats {
    pub fn mean_delta_pct(&self) -> f64 {
        self.mean_delta * 100.0
    }

    pub fn std_delta_pct(&self) -> f64 {
        self.std_delta * 100.0
    }
}

pub fn suite_stats(results: Vec<CaseResult>) -> Result<SuiteStats> {
    if results.is_empty() {
        return Err(Error::Data("no case results to summarize".into()));
    }
    let n = results.len() as f64;
    let mean: f64 = results.iter().map(|r| r.delta).sum::<f64>() / n;
    let std = if results.len() < 2 {
        0.0
    } else {
        let ss: f64 = results.iter().map(|r| (r.delta - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    };
    Ok(SuiteStats {
        mean_delta: mean,
        std_delta: std,
        results,
    })
}

/// Runs a whole suite under one intervention.
pub fn run_suite(model: &Model<f64>, cases: &[TaskCase], spec: Option<&InterventionSpec>) -> Result<SuiteStats> {
    let mut results = Vec::with_capacity(cases.len());
    for case in cases {
        results.push(run_case(model, case, spec)?);
    }
    suite_stats(results)
}

/// Mean deltas of task suites crossed with fully-ablated head groups.
#[derive(Debug, Clone)]
pub struct EffectMatrix {
    pub task_names: Vec<String>,
    pub group_names: Vec<String>,
    /// `cells[task][group]` = mean delta with that group ablated.
    pub cells: Vec<Vec<f64>>,
    /// Mean |on-target| over mean |off-target| along the diagonal pairing.
    pub diagonality: f64,
}

pub fn effect_matrix(
    model: &Model<f64>,
    suites: &[(String, Vec<TaskCase>)],
    groups: &[(String, Vec<(usize, usize)>)],
) -> Result<EffectMatrix> {
    let mut cells = Vec::with_capacity(suites.len());
    for (_, cases) in suites {
        let mut row = Vec::with_capacity(groups.len());
        for (_, heads) in groups {
            let spec = InterventionSpec::ablation(heads.iter().copied());
            let stats = run_suite(model, cases, Some(&spec))?;
            row.push(stats.mean_delta);
        }
        cells.push(row);
    }
    let k = suites.len().min(groups.len());
    let mut on = Vec::new();
    let mut off = Vec::new();
    for (i, row) in cells.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i == j && i < k {
                on.push(v.abs());
            } else {
                off.push(v.abs());
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let diagonality = mean(&on) / mean(&off).max(1e-12);
    Ok(EffectMatrix {
        task_names: suites.iter().map(|(n, _)| n.clone()).collect(),
        group_names: groups.iter().map(|(n, _)| n.clone()).collect(),
        cells,
        diagonality,
    })
}

/// Mean correct-token probability as the target heads' scale sweeps a grid.
#[derive(Debug, Clone)]
pub struct SteeringCurve {
    pub scales: Vec<f64>,
    pub mean_p: Vec<f64>,
    /// Max minus min of the curve: the leverage the heads provide.
    pub control_range: f64,
}

/// The default sweep grid from 0 to 1.5 in quarter steps.
pub fn default_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5]
}

pub fn steering_sweep(
    model: &Model<f64>,
    cases: &[TaskCase],
    targets: &[(usize, usize)],
    grid: &[f64],
) -> Result<SteeringCurve> {
    if cases.is_empty() {
        return Err(Error::Data("steering sweep needs at least one case".into()));
    }
    if grid.is_empty()
        || !grid.contains(&0.0)
        || !grid.contains(&1.0)
        || grid.iter().any(|&s| !(0.0..=InterventionSpec::MAX_SCALE).contains(&s))
    {
        return Err(Error::Config(format!(
            "sweep grid must lie in [0, {}] and include 0 and 1",
            InterventionSpec::MAX_SCALE
        )));
    }
    let mut mean_p = Vec::with_capacity(grid.len());
    for &s in grid {
        let spec = InterventionSpec::new(targets.iter().copied(), s)?;
        let mut total = 0.0;
        for case in cases {
            total += correct_probability(model, case, Some(&spec))?;
        }
        mean_p.push(total / cases.len() as f64);
    }
    let max = mean_p.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = mean_p.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    Ok(SteeringCurve {
        scales: grid.to_vec(),
        mean_p,
        control_range: max - min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EvalOptions, ModelConfig, StreamMode};

    fn tiny_model() -> Model<f64> {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            ffn_dim: 16,
            vocab: 16,
            max_seq: 16,
            dropout: 0.0,
            lambda: 0.1,
            pls_enabled: true,
            mode: StreamMode::Cascade,
        };
        Model::init(cfg, 41).unwrap()
    }

    fn tiny_case() -> TaskCase {
        TaskCase {
            task: TaskKind::Custom,
            context_ids: vec![1, 5, 2, 9],
            correct_id: 3,
            incorrect_id: Some(4),
        }
    }

    #[test]
    fn suite_file_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("suite.tsv");
        let cases = vec![
            tiny_case(),
            TaskCase {
                task: TaskKind::Gender,
                context_ids: vec![2, 3],
                correct_id: 7,
                incorrect_id: None,
            },
        ];
        save_suite(&path, &cases).unwrap();
        let loaded = load_suite(&path, 16).unwrap();
        assert_eq!(loaded, cases);

        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "custom\t1,2\t99\n").unwrap();
        let err = load_suite(&bad, 16).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        std::fs::write(&bad, "custom\t1,2\t3\nmystery\t1,2\t3\n").unwrap();
        let err = load_suite(&bad, 16).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        std::fs::write(&bad, "custom\t5\t3\n").unwrap();
        assert!(load_suite(&bad, 16).is_err(), "context too short");
        std::fs::write(&bad, "").unwrap();
        assert!(load_suite(&bad, 16).unwrap().is_empty());
    }

    #[test]
    fn unit_scale_reproduces_baseline_bits() {
        let m = tiny_model();
        let case = tiny_case();
        let spec = InterventionSpec::new([(0usize, 0usize), (1, 1)], 1.0).unwrap();
        let r = run_case(&m, &case, Some(&spec)).unwrap();
        assert_eq!(r.p_baseline.to_bits(), r.p_intervened.to_bits());
        assert_eq!(r.delta, 0.0);
        let none = run_case(&m, &case, None).unwrap();
        assert_eq!(none.delta, 0.0);
    }

    #[test]
    fn full_ablation_matches_attention_free_forward() {
        let m = tiny_model();
        let case = tiny_case();
        let mut all = Vec::new();
        for l in 0..m.cfg.layers {
            for h in 0..m.cfg.heads {
                all.push((l, h));
            }
        }
        let spec = InterventionSpec::ablation(all);
        let r = run_case(&m, &case, Some(&spec)).unwrap();
        let pass = m
            .forward(
                &case.context_ids,
                EvalOptions {
                    skip_attention: true,
                    ..Default::default()
                },
            )
            .unwrap();
        let tq = case.context_ids.len() - 1;
        let mut probs = pass.logit_row(m.cfg.layers - 1, tq).to_vec();
        kernels::softmax_slice(&mut probs);
        assert!((r.p_intervened - probs[case.correct_id as usize]).abs() < 1e-6);
    }

    #[test]
    fn stats_use_sample_deviation() {
        let mk = |delta: f64| CaseResult {
            p_baseline: 0.5,
            p_intervened: 0.5 + delta,
            delta,
        };
        let s = suite_stats(vec![mk(-0.01), mk(0.01)]).unwrap();
        assert!(s.mean_delta.abs() < 1e-15);
        assert!((s.std_delta - 0.01414213562373095).abs() < 1e-12);
        assert!((s.std_delta_pct() - 1.414213562373095).abs() < 1e-10);
        assert_eq!(suite_stats(vec![mk(0.3)]).unwrap().std_delta, 0.0);
        assert!(suite_stats(Vec::new()).is_err());
    }

    #[test]
    fn effect_matrix_zeroes_empty_groups() {
        let m = tiny_model();
        let suites = vec![
            ("a".to_string(), vec![tiny_case()]),
            (
                "b".to_string(),
                vec![TaskCase {
                    task: TaskKind::Custom,
                    context_ids: vec![4, 2, 11],
                    correct_id: 1,
                    incorrect_id: None,
                }],
            ),
        ];
        let groups = vec![
            ("none".to_string(), Vec::new()),
            ("first".to_string(), vec![(0usize, 0usize)]),
        ];
        let em = effect_matrix(&m, &suites, &groups).unwrap();
        assert_eq!(em.cells.len(), 2);
        assert_eq!(em.cells[0][0], 0.0, "empty group is the identity");
        assert_eq!(em.cells[1][0], 0.0);
        assert!(em.diagonality >= 0.0);
    }

    #[test]
    fn sweep_endpoints_match_identities() {
        let m = tiny_model();
        let cases = vec![tiny_case()];
        let targets = vec![(1usize, 0usize)];
        let curve = steering_sweep(&m, &cases, &targets, &default_grid()).unwrap();
        assert_eq!(curve.scales.len(), curve.mean_p.len());
        let baseline = run_case(&m, &cases[0], None).unwrap().p_baseline;
        let idx1 = curve.scales.iter().position(|&s| s == 1.0).unwrap();
        assert_eq!(curve.mean_p[idx1].to_bits(), baseline.to_bits());
        let ablated = run_case(
            &m,
            &cases[0],
            Some(&InterventionSpec::ablation(targets.iter().copied())),
        )
        .unwrap()
        .p_intervened;
        assert_eq!(curve.mean_p[0].to_bits(), ablated.to_bits());
        assert!(curve.control_range >= 0.0);

        assert!(steering_sweep(&m, &cases, &targets, &[0.5, 1.0]).is_err());
        assert!(steering_sweep(&m, &cases, &targets, &[0.0, 1.0, 2.0]).is_err());
        assert!(steering_sweep(&m, &[], &targets, &default_grid()).is_err());
    }
}
