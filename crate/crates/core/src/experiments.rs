//! Scenario experiments: single-site baselines against federation, and
//! model quality as a function of training-set size.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::{self, Scenario, SiteDataset, SiteProfile};
use crate::metrics::{self, EvalMatrix, EvalReport};
use crate::seed::derive_seed;
use crate::sim::{run_federation, FaultPlan, RoundMetrics, SimConfig, SimError, SimStats};
use crate::tensor::TensorMap;
use crate::trainer::{self, TrainState};

pub const LOCAL_EPOCHS: usize = 100;
pub const DEFAULT_SWEEP_SIZES: [usize; 5] = [200, 400, 600, 800, 1000];
/// Size of the independent evaluation set used by the size sweep.
pub const SWEEP_HOLDOUT: usize = 2000;

/// Cross-site behaviour of one local baseline model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalBaseline {
    pub site_id: String,
    pub epochs: usize,
    pub final_val_loss: f64,
    pub cross_site_sensitivity: Option<f64>,
    pub cross_site_specificity: Option<f64>,
    pub cross_site_balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub rounds: Vec<RoundMetrics>,
    pub federated: Option<EvalMatrix>,
    pub local: Option<EvalMatrix>,
    pub local_baselines: Vec<LocalBaseline>,
    pub stats: Option<SimStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub seed: u64,
    pub size: usize,
    pub train_samples: usize,
    /// Scored on the size's own test split.
    pub own_test: EvalReport,
    /// Scored on the shared holdout set.
    pub holdout: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    pub size_sweep: Vec<SizePoint>,
    pub summary: BTreeMap<String, f64>,
    /// Local models whose seed-averaged cross-site sensitivity or specificity is below 0.1.
    pub collapsed_models: Vec<String>,
    pub wall_clock_ms: u64,
}

impl ExperimentReport {
    fn new(scenario: &str, seeds: &[u64]) -> Self {
        Self {
            scenario: scenario.into(),
            seeds: seeds.to_vec(),
            runs: Vec::new(),
            size_sweep: Vec::new(),
            summary: BTreeMap::new(),
            collapsed_models: Vec::new(),
            wall_clock_ms: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.json` plus one metrics CSV per matrix into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SimError> {
        let io = |e: std::io::Error| SimError::Data(e.into());
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join("report.json"), self.to_json()).map_err(io)?;
        for run in &self.runs {
            for (kind, matrix) in [("local", &run.local), ("federated", &run.federated)] {
                if let Some(m) = matrix {
                    let file = std::fs::File::create(dir.join(format!("{kind}_seed{}.csv", run.seed))).map_err(io)?;
                    m.write_csv(file).map_err(io)?;
                }
            }
        }
        Ok(())
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Trains one model per site on its own data for `epochs`, from the shared
/// initial model with each site's federated trainer settings.
pub fn train_local_baselines(
    sites: &[SiteDataset],
    config: &SimConfig,
    epochs: usize,
) -> Result<BTreeMap<String, (TensorMap, f64)>, SimError> {
    let init = config.initial_model(sites[0].dim())?;
    let mut out = BTreeMap::new();
    for (i, site) in sites.iter().enumerate() {
        let tc = config.trainer_config(i);
        let mut state = TrainState::new(&tc);
        let report = trainer::train_local(&init, site, epochs, tc.seed, &tc, &mut state)?;
        out.insert(site.site_id.clone(), (report.weights, report.final_val_loss));
    }
    Ok(out)
}

fn site_map(sites: &[SiteDataset]) -> BTreeMap<String, SiteDataset> {
    sites.iter().map(|s| (s.site_id.clone(), s.clone())).collect()
}

/// Mean balanced accuracy of `model` over the test splits of `sites`.
fn mean_balanced_accuracy(model: &TensorMap, sites: &[&SiteDataset]) -> Result<f64, SimError> {
    let mut values = Vec::new();
    for s in sites {
        if let Some(b) = metrics::evaluate("model", model, s)?.balanced_accuracy {
            values.push(b);
        }
    }
    Ok(mean(values).unwrap_or(f64::NAN))
}

/// Options for [`experiment_local_vs_federated`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonOptions {
    pub local_epochs: usize,
    /// Site left out in the ablation run; `None` skips the ablation.
    pub ablate_site: Option<String>,
}

impl Default for ComparisonOptions {
    fn default() -> Self {
        Self {
            local_epochs: LOCAL_EPOCHS,
            ablate_site: Some("uganda".into()),
        }
    }
}

/// Local baselines versus one federated model per seed.
///
/// Summary keys:
/// - `local_cross_site_ba`: mean over seeds and off-diagonal cells of the local matrix.
/// - `federated_ba`: mean over seeds and sites of the federated model's balanced accuracy.
/// - `margin`: their difference.
/// - `ablation_ba_with` / `ablation_ba_without` / `ablation_drop`: federated balanced
///   accuracy on the remaining sites with and without the ablated site.
pub fn experiment_local_vs_federated(
    scenario: &Scenario,
    seeds: &[u64],
    config: &SimConfig,
    options: &ComparisonOptions,
) -> Result<ExperimentReport, SimError> {
    let started = std::time::Instant::now();
    let mut report = ExperimentReport::new(&scenario.name, seeds);
    let mut local_ba = Vec::new();
    let mut fed_ba = Vec::new();
    let mut ablation = (Vec::new(), Vec::new());
    let mut per_model: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for &seed in seeds {
        let sites = scenario.generate(seed)?;
        let run_config = SimConfig {
            seed: derive_seed(config.seed, seed),
            ..config.clone()
        };
        let locals = train_local_baselines(&sites, &run_config, options.local_epochs)?;
        let models: BTreeMap<String, TensorMap> = locals.iter().map(|(k, (m, _))| (k.clone(), m.clone())).collect();
        let local = metrics::cross_eval(&models, &site_map(&sites))?;
        let mut baselines = Vec::new();
        for (site_id, (_, val_loss)) in &locals {
            let off = local
                .off_diagonal()
                .filter(|r| &r.model_site == site_id)
                .collect::<Vec<_>>();
            let sens = mean(off.iter().filter_map(|r| r.sensitivity));
            let spec = mean(off.iter().filter_map(|r| r.specificity));
            let ba = mean(off.iter().filter_map(|r| r.balanced_accuracy));
            let entry = per_model.entry(site_id.clone()).or_default();
            entry.0.extend(sens);
            entry.1.extend(spec);
            baselines.push(LocalBaseline {
                site_id: site_id.clone(),
                epochs: options.local_epochs,
                final_val_loss: *val_loss,
                cross_site_sensitivity: sens,
                cross_site_specificity: spec,
                cross_site_balanced_accuracy: ba,
            });
        }
        local_ba.extend(local.off_diagonal().filter_map(|r| r.balanced_accuracy));

        let plan = FaultPlan::none(seed);
        let fed = run_federation(&sites, &run_config, &plan)?;
        let fed_models = BTreeMap::from([("federated".to_string(), fed.final_model.clone())]);
        let federated = metrics::cross_eval(&fed_models, &site_map(&sites))?;
        fed_ba.extend(federated.reports.iter().filter_map(|r| r.balanced_accuracy));

        if let Some(skip) = &options.ablate_site {
            let kept: Vec<SiteDataset> = sites.iter().filter(|s| &s.site_id != skip).cloned().collect();
            if kept.len() < sites.len() {
                let without = run_federation(&kept, &run_config, &plan)?;
                let kept_refs: Vec<&SiteDataset> = kept.iter().collect();
                ablation.0.push(mean_balanced_accuracy(&fed.final_model, &kept_refs)?);
                ablation
                    .1
                    .push(mean_balanced_accuracy(&without.final_model, &kept_refs)?);
            }
        }

        report.runs.push(SeedRun {
            seed,
            rounds: fed.rounds,
            federated: Some(federated),
            local: Some(local),
            local_baselines: baselines,
            stats: Some(fed.stats),
        });
    }
    let local_mean = mean(local_ba).unwrap_or(f64::NAN);
    let fed_mean = mean(fed_ba).unwrap_or(f64::NAN);
    report.summary.insert("local_cross_site_ba".into(), local_mean);
    report.summary.insert("federated_ba".into(), fed_mean);
    report.summary.insert("margin".into(), fed_mean - local_mean);
    for (site, (sens, spec)) in &per_model {
        let sens = mean(sens.iter().copied()).unwrap_or(f64::NAN);
        let spec = mean(spec.iter().copied()).unwrap_or(f64::NAN);
        report.summary.insert(format!("cross_site_sensitivity.{site}"), sens);
        report.summary.insert(format!("cross_site_specificity.{site}"), spec);
        if sens < 0.1 || spec < 0.1 {
            report.collapsed_models.push(site.clone());
        }
    }
    report
        .summary
        .insert("collapsed_models".into(), report.collapsed_models.len() as f64);
    if let (Some(with), Some(without)) = (mean(ablation.0), mean(ablation.1)) {
        report.summary.insert("ablation_ba_with".into(), with);
        report.summary.insert("ablation_ba_without".into(), without);
        report.summary.insert("ablation_drop".into(), without - with);
    }
    report.wall_clock_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

/// One model per training-set size, drawn as nested prefixes of a single
/// generated pool. Each model is scored on its own test split and on an
/// independent holdout set from the same profile.
///
/// Summary keys: `mean_ba.<size>` (holdout, averaged over seeds) and
/// `spearman_rho` between size and that mean.
pub fn experiment_size_sweep(
    scenario: &Scenario,
    sizes: &[usize],
    seeds: &[u64],
    config: &SimConfig,
    epochs: usize,
) -> Result<ExperimentReport, SimError> {
    let started = std::time::Instant::now();
    let profile: &SiteProfile = scenario
        .sites
        .first()
        .ok_or_else(|| SimError::InvalidPlan("size sweep needs one site profile".into()))?;
    if sizes.is_empty() {
        return Err(SimError::InvalidPlan("no sizes given".into()));
    }
    let max = *sizes.iter().max().expect("non-empty");
    if let Some(bad) = sizes.iter().find(|&&s| s < 10) {
        return Err(SimError::InvalidPlan(format!(
            "size {bad} is below the 10-sample minimum"
        )));
    }
    let mut report = ExperimentReport::new(&scenario.name, seeds);
    for &seed in seeds {
        let pool_profile = SiteProfile {
            n_samples: max.max(profile.n_samples),
            seed: derive_seed(profile.seed, seed),
            ..profile.clone()
        };
        let pool = datakit::generate_site_with(&pool_profile, scenario.input_dim, scenario.split)?;
        let holdout = datakit::generate_site_with(
            &SiteProfile {
                site_id: format!("{}-holdout", profile.site_id),
                n_samples: SWEEP_HOLDOUT,
                seed: derive_seed(pool_profile.seed, u64::MAX),
                ..profile.clone()
            },
            scenario.input_dim,
            datakit::SplitRatios {
                train_pct: 0,
                val_pct: 0,
            },
        )?;
        let run_config = SimConfig {
            seed: derive_seed(config.seed, seed),
            ..config.clone()
        };
        let init = run_config.initial_model(scenario.input_dim)?;
        for &size in sizes {
            let data = pool.truncated(size, derive_seed(pool_profile.seed, size as u64), scenario.split)?;
            let tc = run_config.trainer_config(0);
            let mut state = TrainState::new(&tc);
            let trained = trainer::train_local(&init, &data, epochs, tc.seed, &tc, &mut state)?;
            report.size_sweep.push(SizePoint {
                seed,
                size,
                train_samples: trained.sample_count,
                own_test: metrics::evaluate(&format!("size{size}"), &trained.weights, &data)?,
                holdout: metrics::evaluate(&format!("size{size}"), &trained.weights, &holdout)?,
            });
        }
    }
    let mut means = Vec::new();
    for &size in sizes {
        let m = mean(
            report
                .size_sweep
                .iter()
                .filter(|p| p.size == size)
                .filter_map(|p| p.holdout.balanced_accuracy),
        )
        .unwrap_or(f64::NAN);
        report.summary.insert(format!("mean_ba.{size}"), m);
        means.push(m);
    }
    let xs: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    report.summary.insert("spearman_rho".into(), spearman(&xs, &means));
    report.wall_clock_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
