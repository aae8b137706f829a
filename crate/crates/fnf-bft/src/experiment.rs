//! One level above the world: build it from a configuration and a seed, run
//! it to the configured stopping rule, and distill what both the command
//! line and the acceptance checks consume.
//!
//! Two stopping rules cover every experiment here. A closed-loop run (no
//! per-client budget) stops once every correct replica is past the
//! configured epoch count; a budgeted run stops when all clients have
//! collected their answers, then idles briefly so meters and logs settle.
//! Either way the world's own audits run at the end.

use crate::adversary::{PreGstPolicy, Profile};
use crate::config::ExperimentConfig;
use crate::crypto::EpochOps;
use crate::metrics::{self, EpochRow};
use crate::simnet::{NetConfig, World, WorldError, WorldSetup};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Replica indices the adversary controls: the top `f` ids. With corruption
/// at the top, the first `2f+1` explore-order conductors are correct, which
/// the degradation experiments rely on.
pub fn corrupted_ids(cfg: &ExperimentConfig) -> Vec<usize> {
    if cfg.adversary == Profile::None {
        return Vec::new();
    }
    let n = cfg.n();
    (n - cfg.f as usize..n).collect()
}

pub fn build_world(cfg: &ExperimentConfig, seed: u64) -> World {
    build_world_opts(cfg, seed, PreGstPolicy::Random, false)
}

pub fn build_world_opts(
    cfg: &ExperimentConfig,
    seed: u64,
    pre_gst: PreGstPolicy,
    trace: bool,
) -> World {
    let n = cfg.n() as u64;
    // Drip participation sits just under the no-progress timeout: the
    // starved lane advances, but never fast and never visibly stalled.
    let drip = cfg.progress_timer.saturating_sub(cfg.delta).max(1);
    let corruption = corrupted_ids(cfg)
        .into_iter()
        .filter_map(|r| cfg.adversary.corruption(drip).map(|c| (r, c)))
        .collect();
    World::new(WorldSetup {
        replicas: (0..n).map(|id| cfg.replica_cfg(id)).collect(),
        corruption,
        clients: cfg.make_clients(),
        net: NetConfig {
            gst: cfg.gst,
            delta: cfg.delta,
            seed,
            clock: cfg.clock,
            pre_gst,
            max_events: cfg.max_events,
            trace,
        },
    })
}

/// Ceiling on simulated time: enough for every configured epoch plus
/// generous change overhead. Runs stop on their rule well before this; the
/// ceiling only bounds a run whose stop condition never fires.
fn deadline(cfg: &ExperimentConfig) -> u64 {
    let per_epoch = cfg.epoch_timer + 1024 * cfg.change_timer + 200 * cfg.delta;
    cfg.gst + (cfg.epochs + 4) * per_epoch
}

/// One finished run: the world (with its logs and meters) plus the
/// distilled per-epoch rows.
pub struct Run {
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub world: World,
}

pub fn run_world(cfg: &ExperimentConfig, seed: u64) -> Result<Run, WorldError> {
    run_world_with(cfg, seed, PreGstPolicy::Random)
}

pub fn run_world_with(
    cfg: &ExperimentConfig,
    seed: u64,
    pre_gst: PreGstPolicy,
) -> Result<Run, WorldError> {
    let mut w = build_world_opts(cfg, seed, pre_gst, false);
    w.start();
    let corrupt = corrupted_ids(cfg);
    let budgeted = cfg.client_total.is_some();
    let epochs = cfg.epochs;
    w.run_until(deadline(cfg), |w| {
        if budgeted {
            w.clients.iter().all(|c| c.done())
        } else {
            (0..w.replicas.len())
                .filter(|r| !corrupt.contains(r))
                .all(|r| w.replicas[r].epoch() > epochs)
        }
    })?;
    if budgeted {
        // Answers are in flight when the last client turns done; let the
        // tail of the pipeline (execution, checkpoints, the closing change)
        // finish before reading meters.
        let settle = w.now + 200 * cfg.delta.max(1) + 10 * cfg.change_timer;
        w.run_until(settle, |_| false)?;
    }
    w.final_audit();
    let rows = harvest(&w, cfg);
    Ok(Run { seed, rows, world: w })
}

/// All configured seeds in parallel.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<Vec<Run>, WorldError> {
    cfg.seeds.par_iter().map(|&s| run_world(cfg, s)).collect()
}

/// Distill per-epoch rows from a finished world. Timing comes from the
/// lowest-id correct replica (entry observation to the change call that
/// closed the epoch); commit counts come from the world's own audit log,
/// not from any replica. Epochs the run stopped inside are dropped.
pub fn harvest(w: &World, cfg: &ExperimentConfig) -> Vec<EpochRow> {
    let corrupt = corrupted_ids(cfg);
    let r0 = (0..w.replicas.len())
        .find(|r| !corrupt.contains(r))
        .expect("at least one correct replica");
    let calls = w.change_calls(r0);
    let mut committed: BTreeMap<u64, u64> = BTreeMap::new();
    for rec in w.commit_log.values() {
        if !rec.null {
            *committed.entry(rec.epoch).or_insert(0) += 1;
        }
    }
    let mut rows = Vec::new();
    for (e, at) in w.entries(r0) {
        let Some(&(_, ended)) = calls.iter().find(|&&(t, ct)| ct >= at && t > e) else {
            continue;
        };
        rows.push(EpochRow {
            epoch: e,
            primary: None,
            entered: at,
            ended,
            committed: committed.get(&e).copied().unwrap_or(0),
            ops: (0..w.replicas.len()).map(|r| w.replicas[r].meter.epoch_ops(e)).collect(),
        });
    }
    rows
}

/// Change-class op splits for the change out of each completed epoch,
/// flattened across correct replicas — the companion input to the
/// amortized-cost metric.
pub fn change_ops(w: &World, cfg: &ExperimentConfig, rows: &[EpochRow]) -> Vec<EpochOps> {
    let corrupt = corrupted_ids(cfg);
    let mut out = Vec::new();
    for row in rows {
        for r in 0..w.replicas.len() {
            if !corrupt.contains(&r) {
                out.push(w.replicas[r].meter.epoch_ops(row.epoch));
            }
        }
    }
    out
}

// ---- checks ----------------------------------------------------------------

/// One named verdict, printable as a single line.
pub struct CheckReport {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!("{}: {} — {}", self.name, if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

fn refusals_at_correct(w: &World, corrupt: &[usize]) -> usize {
    (0..w.replicas.len())
        .filter(|r| !corrupt.contains(r))
        .map(|r| {
            w.observations[r]
                .iter()
                .filter(|(_, ob)| {
                    matches!(ob, crate::replica::Observation::Refused { .. })
                })
                .count()
        })
        .sum()
}

/// No two correct replicas ever commit different requests at one global
/// sequence number, nothing correct-to-correct is lost, and no correct
/// replica refuses an epoch entry. The commit audit itself runs inside the
/// world at delivery time; a violation surfaces as a run error here.
pub fn check_safety(cfg: &ExperimentConfig) -> CheckReport {
    let corrupt = corrupted_ids(cfg);
    let results: Vec<Result<(u64, usize, u64), String>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            // Alternate the pre-stabilization scheduling policy so both the
            // scatter and the split-the-quorum shapes get exercised.
            let policy = if seed % 2 == 0 {
                PreGstPolicy::Random
            } else {
                PreGstPolicy::SlowVictim(crate::types::ReplicaId(seed % cfg.n() as u64))
            };
            match run_world_with(cfg, seed, policy) {
                Ok(run) => {
                    let refused = refusals_at_correct(&run.world, &corrupt);
                    let commits =
                        run.world.commit_log.values().filter(|c| !c.null).count() as u64;
                    Ok((seed, refused, commits))
                }
                Err(e) => Err(format!("seed {seed}: {e}")),
            }
        })
        .collect();
    let mut commits_total = 0u64;
    for r in &results {
        match r {
            Ok((seed, refused, commits)) => {
                if *refused > 0 {
                    return CheckReport {
                        name: "safety",
                        pass: false,
                        detail: format!("seed {seed}: {refused} refusals at correct replicas"),
                    };
                }
                commits_total += commits;
            }
            Err(e) => {
                return CheckReport { name: "safety", pass: false, detail: e.clone() };
            }
        }
    }
    CheckReport {
        name: "safety",
        pass: true,
        detail: format!(
            "{} seeds, adversary {}, {} non-null commits, zero divergence",
            cfg.seeds.len(),
            cfg.adversary.name(),
            commits_total
        ),
    }
}

/// Every request completes, and no completion crosses more than `m·n` epoch
/// boundaries after the later of its issue time and stabilization.
pub fn check_liveness(cfg: &ExperimentConfig) -> CheckReport {
    let mut cfg = cfg.clone();
    if cfg.client_total.is_none() {
        // Completion of "every request" needs a finite demand.
        cfg.client_total = Some(20);
    }
    let bound = cfg.m * cfg.n() as u64;
    let corrupt = corrupted_ids(&cfg);
    let results: Vec<Result<u64, String>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let run = run_world(&cfg, seed).map_err(|e| format!("seed {seed}: {e}"))?;
            let w = &run.world;
            let r0 = (0..w.replicas.len()).find(|r| !corrupt.contains(r)).unwrap();
            let entries = w.entries(r0);
            let mut worst = 0u64;
            for c in &w.clients {
                if !c.done() {
                    return Err(format!(
                        "seed {seed}: client {} finished only {} of its requests",
                        c.id().0,
                        c.stats.completed
                    ));
                }
                for done in &c.stats.completions {
                    let start = done.issued_at.max(cfg.gst);
                    let crossings = entries
                        .iter()
                        .filter(|&&(_, at)| at > start && at <= done.completed_at)
                        .count() as u64;
                    if crossings > bound {
                        return Err(format!(
                            "seed {seed}: client {} request ts={} took {crossings} epoch boundaries (bound {bound})",
                            c.id().0,
                            done.timestamp
                        ));
                    }
                    worst = worst.max(crossings);
                }
            }
            Ok(worst)
        })
        .collect();
    let mut worst = 0u64;
    for r in &results {
        match r {
            Ok(w) => worst = worst.max(*w),
            Err(e) => return CheckReport { name: "liveness", pass: false, detail: e.clone() },
        }
    }
    CheckReport {
        name: "liveness",
        pass: true,
        detail: format!(
            "{} seeds, all requests answered, worst completion {} of {} allowed epoch boundaries",
            cfg.seeds.len(),
            worst,
            bound
        ),
    }
}

/// Matched-window throughput ratio against an otherwise-identical
/// fault-free run, compared to the finite-horizon degradation floor for a
/// hanging leader. Meaningful when capacities are large enough that both
/// runs cut their epochs on the timer; the caller's configuration chooses
/// that regime.
pub fn check_utilization(cfg: &ExperimentConfig) -> CheckReport {
    let mut best_cfg = cfg.clone();
    best_cfg.adversary = Profile::None;
    let first = 2.min(cfg.epochs);
    let window = |run: &Run| -> Vec<f64> {
        run.rows
            .iter()
            .filter(|r| r.epoch >= first && r.epoch <= cfg.epochs)
            .map(|r| r.throughput())
            .collect()
    };
    let floor = metrics::hang_utilization_bound(cfg.f, cfg.k, cfg.epoch_timer) - 0.05;
    let results: Vec<Result<(f64, u64), String>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let worst = run_world(cfg, seed).map_err(|e| format!("seed {seed}: {e}"))?;
            let best = run_world(&best_cfg, seed).map_err(|e| format!("seed {seed}: {e}"))?;
            let (wu, bu) = (window(&worst), window(&best));
            if wu.is_empty() || wu.len() != bu.len() {
                return Err(format!(
                    "seed {seed}: mismatched measurement windows ({} vs {})",
                    wu.len(),
                    bu.len()
                ));
            }
            let util = metrics::effective_utilization(&wu, &bu);
            // The hanging lane's extractable work is bounded: per epoch it
            // wastes at most 8kf operations across each correct replica.
            let epochs_seen = worst.rows.len() as u64 + 1;
            let cap = 8 * cfg.k * cfg.f * epochs_seen;
            let waste = worst
                .world
                .byz_lane_ops
                .iter()
                .enumerate()
                .filter(|(r, _)| !corrupted_ids(cfg).contains(r))
                .map(|(_, &v)| v)
                .max()
                .unwrap_or(0);
            if waste > cap {
                return Err(format!(
                    "seed {seed}: hanging lane extracted {waste} ops from a correct replica, above the {cap} budget"
                ));
            }
            Ok((util, waste))
        })
        .collect();
    let mut min_util = f64::INFINITY;
    let mut max_waste = 0;
    for r in &results {
        match r {
            Ok((u, w)) => {
                min_util = min_util.min(*u);
                max_waste = max_waste.max(*w);
            }
            Err(e) => {
                return CheckReport { name: "utilization", pass: false, detail: e.clone() };
            }
        }
    }
    CheckReport {
        name: "utilization",
        pass: min_util >= floor,
        detail: format!(
            "worst-seed utilization {:.4} vs floor {:.4} (adversary {}, worst byz-lane waste {} ops)",
            min_util,
            floor,
            cfg.adversary.name(),
            max_waste
        ),
    }
}

/// Per-change authenticator cost measured at three system sizes. The
/// change-class meter should grow about quadratically in n, and the
/// all-in amortized cost per committed request about linearly.
pub fn check_complexity(base: &ExperimentConfig) -> CheckReport {
    let sizes: Vec<u64> = vec![1, 2, 3];
    let mut ns = Vec::new();
    let mut change_cost = Vec::new();
    let mut amortized = Vec::new();
    for &f in &sizes {
        let cfg = match (crate::config::Overrides {
            f: Some(f),
            k: Some(base.k),
            epochs: Some(2),
            seeds: Some(vec![base.seeds.first().copied().unwrap_or(1)]),
            ..Default::default()
        })
        .resolve()
        {
            Ok(c) => c,
            Err(e) => {
                return CheckReport {
                    name: "complexity",
                    pass: false,
                    detail: format!("f={f}: {e}"),
                };
            }
        };
        let run = match run_world(&cfg, cfg.seeds[0]) {
            Ok(r) => r,
            Err(e) => {
                return CheckReport {
                    name: "complexity",
                    pass: false,
                    detail: format!("f={f}: {e}"),
                };
            }
        };
        if run.rows.is_empty() {
            return CheckReport {
                name: "complexity",
                pass: false,
                detail: format!("f={f}: no completed epochs"),
            };
        }
        let cops = change_ops(&run.world, &cfg, &run.rows);
        let per_change =
            cops.iter().map(|o| o.change.total()).sum::<u64>() as f64 / cops.len() as f64;
        ns.push(cfg.n() as f64);
        change_cost.push(per_change);
        amortized.push(metrics::amortized_ops_per_commit(&run.rows, &cops));
    }
    let (expo, _) = metrics::fit_power(&ns, &change_cost);
    let ratio = change_cost[change_cost.len() - 1] / change_cost[0];
    let (_, _, r2) = metrics::fit_linear(&ns, &amortized);
    let pass = (1.6..=2.4).contains(&expo) && (4.0..=9.0).contains(&ratio) && r2 >= 0.9;
    CheckReport {
        name: "complexity",
        pass,
        detail: format!(
            "change-cost exponent {:.2} over n={:?} (n-max/n-min ratio {:.2}), amortized linear fit r²={:.3}",
            expo,
            ns.iter().map(|&x| x as u64).collect::<Vec<_>>(),
            ratio,
            r2
        ),
    }
}

/// The checks behind `--check`, in reporting order.
pub fn run_checks(cfg: &ExperimentConfig, which: &str) -> Result<Vec<CheckReport>, String> {
    match which {
        "safety" => Ok(vec![check_safety(cfg)]),
        "liveness" => Ok(vec![check_liveness(cfg)]),
        "utilization" => Ok(vec![check_utilization(cfg)]),
        "complexity" => Ok(vec![check_complexity(cfg)]),
        "all" => Ok(vec![
            check_safety(cfg),
            check_liveness(cfg),
            check_utilization(cfg),
            check_complexity(cfg),
        ]),
        other => Err(format!(
            "unknown check {other:?}: expected safety, liveness, utilization, complexity, or all"
        )),
    }
}

// ---- emission --------------------------------------------------------------

/// Write per-seed epoch CSVs and a run summary into `dir`.
pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    runs: &[Run],
) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for run in runs {
        fs::write(
            dir.join(format!("epochs_seed{}.csv", run.seed)),
            metrics::epoch_csv(&run.rows),
        )?;
        if run.world.net.trace {
            fs::write(
                dir.join(format!("trace_seed{}.jsonl", run.seed)),
                run.world.trace.join("\n"),
            )?;
        }
    }
    fs::write(dir.join("summary.json"), summary_json(cfg, runs))?;
    Ok(())
}

pub fn summary_json(cfg: &ExperimentConfig, runs: &[Run]) -> String {
    let per_run: Vec<serde_json::Value> = runs
        .iter()
        .map(|r| {
            serde_json::json!({
                "seed": r.seed,
                "end_time": r.world.now,
                "events": r.world.events_processed,
                "epochs_completed": r.rows.len(),
                "committed": r.world.commit_log.values().filter(|c| !c.null).count(),
                "max_post_gst_delay": r.world.max_post_gst_delay,
                "byz_lane_ops": r.world.byz_lane_ops,
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "config": {
            "f": cfg.f,
            "n": cfg.n(),
            "m": cfg.m,
            "k": cfg.k,
            "g": cfg.g,
            "c_min": cfg.c_min,
            "delta": cfg.delta,
            "gst": cfg.gst,
            "epoch_timer": cfg.epoch_timer,
            "progress_timer": cfg.progress_timer,
            "change_timer": cfg.change_timer,
            "clients": cfg.clients,
            "adversary": cfg.adversary.name(),
            "clock": format!("{:?}", cfg.clock),
            "seeds": cfg.seeds,
        },
        "runs": per_run,
    }))
    .expect("summary serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Overrides;
    use crate::crypto::OpCounts;

    fn cfg_with(f: impl FnOnce(&mut Overrides)) -> ExperimentConfig {
        let mut o = Overrides::default();
        f(&mut o);
        o.resolve().unwrap()
    }

    #[test]
    fn closed_loop_run_matches_frozen_epoch_budgets() {
        let cfg = cfg_with(|o| o.epochs = Some(2));
        let run = run_world(&cfg, 1).unwrap();
        assert!(run.rows.len() >= 2, "two completed epochs, got {}", run.rows.len());
        let e1 = &run.rows[0];
        assert_eq!(e1.epoch, 1);
        assert_eq!(e1.committed, 80, "first epoch commits its whole capacity");
        for ops in &e1.ops {
            assert_eq!(
                (ops.operation.computed, ops.operation.verified),
                (200, 280),
                "steady-state epoch budget per replica"
            );
        }
        // Filling an epoch doubles every lane's next allotment.
        assert_eq!(run.rows[1].committed, 160);
    }

    #[test]
    fn budgeted_run_stops_after_all_answers() {
        let cfg = cfg_with(|o| o.client_total = Some(1));
        let run = run_world(&cfg, 7).unwrap();
        assert!(run.world.clients.iter().all(|c| c.done()));
        let real = run.world.commit_log.values().filter(|c| !c.null).count();
        assert_eq!(real, 8, "one commit per client");
        assert!(
            run.rows.is_empty(),
            "epoch 1 never closes with demand far below capacity"
        );
    }

    #[test]
    fn safety_check_passes_under_every_profile() {
        for profile in [
            Profile::HangLeader,
            Profile::Unresponsive,
            Profile::AbortPrimary,
            Profile::PartialInit(2),
            Profile::Mixed,
        ] {
            let cfg = cfg_with(|o| {
                o.adversary = Some(profile);
                o.epochs = Some(2);
                o.gst = Some(200);
                o.seeds = Some(vec![3]);
            });
            let report = check_safety(&cfg);
            assert!(report.pass, "{}", report.line());
        }
    }

    #[test]
    fn liveness_check_bounds_epoch_crossings() {
        let cfg = cfg_with(|o| {
            o.adversary = Some(Profile::Unresponsive);
            o.clients = Some(2);
            o.client_total = Some(6);
            o.clock = Some(crate::simnet::ClockMode::Latency);
            o.gst = Some(500);
            o.seeds = Some(vec![2]);
        });
        let report = check_liveness(&cfg);
        assert!(report.pass, "{}", report.line());
    }

    #[test]
    fn utilization_check_meets_degradation_floor() {
        // Timer-cut regime at desk scale: capacities too large to exhaust,
        // both runs end epochs on the timer.
        let cfg = cfg_with(|o| {
            o.adversary = Some(Profile::HangLeader);
            o.c_min = Some(100);
            o.epoch_timer = Some(2000);
            o.delta = Some(1);
            o.epochs = Some(3);
            o.seeds = Some(vec![5]);
        });
        let report = check_utilization(&cfg);
        assert!(report.pass, "{}", report.line());
    }

    #[test]
    fn complexity_check_fits_quadratic_changes() {
        let cfg = cfg_with(|_| {});
        let report = check_complexity(&cfg);
        assert!(report.pass, "{}", report.line());
    }

    #[test]
    fn harvest_drops_the_epoch_the_run_stopped_inside() {
        let cfg = cfg_with(|o| o.epochs = Some(1));
        let run = run_world(&cfg, 1).unwrap();
        let last = run.rows.last().unwrap();
        assert!(last.ended > last.entered);
        let open_epoch = run.world.replicas[0].epoch();
        assert!(run.rows.iter().all(|r| r.epoch < open_epoch));
    }

    #[test]
    fn summary_json_round_trips() {
        let cfg = cfg_with(|o| {
            o.client_total = Some(1);
            o.seeds = Some(vec![4]);
        });
        let runs = vec![run_world(&cfg, 4).unwrap()];
        let v: serde_json::Value = serde_json::from_str(&summary_json(&cfg, &runs)).unwrap();
        assert_eq!(v["config"]["n"], 4);
        assert_eq!(v["runs"][0]["seed"], 4);
        assert_eq!(v["runs"][0]["committed"], 8);
    }

    #[test]
    fn op_counts_total_is_the_sum() {
        let c = OpCounts { computed: 3, verified: 4 };
        assert_eq!(c.total(), 7);
    }
}
