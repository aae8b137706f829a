//! Experiment configuration: defaults, file parsing, validation.
//!
//! A run is fully described by one of these plus a seed. Files are flat
//! `key = value` lines (same names the flags use); flags override the file.
//! Derived values — the epoch timer from capacity, the progress timer from
//! the epoch timer — resolve after both sources merge, so overriding one
//! knob reflows the ones downstream of it unless they were pinned too.

use crate::adversary::Profile;
use crate::client::{Client, ClientConfig};
use crate::replica::ReplicaConfig;
use crate::simnet::ClockMode;
use crate::types::{ClientId, ReplicaId, SystemParams, NULL_CLIENT};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Everything a run needs. Construct via [`Overrides::resolve`] so the
/// derivation and validation rules apply.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub f: u64,
    pub m: u64,
    pub k: u64,
    pub g: u64,
    pub c_min: u64,
    pub delta: u64,
    pub gst: u64,
    pub epoch_timer: u64,
    pub progress_timer: u64,
    pub change_timer: u64,
    pub clients: u64,
    pub client_window: u64,
    /// Per-client request budget; `None` keeps the loop closed until the
    /// run's stop condition.
    pub client_total: Option<u64>,
    pub adversary: Profile,
    pub seeds: Vec<u64>,
    pub clock: ClockMode,
    /// Stop once every correct replica has entered this epoch.
    pub epochs: u64,
    pub max_events: u64,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn n(&self) -> usize {
        3 * self.f as usize + 1
    }

    pub fn params(&self) -> SystemParams {
        SystemParams::from_f(self.f as usize)
    }

    pub fn replica_cfg(&self, id: u64) -> ReplicaConfig {
        ReplicaConfig {
            params: self.params(),
            id: ReplicaId(id),
            m: self.m,
            k: self.k,
            c_min: self.c_min,
            g: self.g,
            epoch_timer: self.epoch_timer,
            progress_timer: self.progress_timer,
            change_timer: self.change_timer,
            delta: self.delta,
        }
    }

    /// Client ids covering every bucket, so each lane sees demand in every
    /// epoch no matter how the ring rotates. Ids are searched upward from 1
    /// until each bucket holds `clients / buckets` of them (rounded up,
    /// capped by the requested count).
    pub fn client_ids(&self) -> Vec<ClientId> {
        let buckets = self.m * self.n() as u64;
        let mut per_bucket: BTreeMap<u64, u64> = BTreeMap::new();
        let quota = self.clients.div_ceil(buckets);
        let mut out = Vec::new();
        let mut id = 1u64;
        while (out.len() as u64) < self.clients {
            let c = ClientId(id);
            id += 1;
            if c == NULL_CLIENT {
                continue;
            }
            let b = crate::partition::bucket_of(c, buckets);
            let filled = per_bucket.entry(b).or_insert(0);
            if *filled < quota {
                *filled += 1;
                out.push(c);
            }
            assert!(id < 1_000_000, "bucket search ran away");
        }
        out
    }

    pub fn make_clients(&self) -> Vec<Client> {
        self.client_ids()
            .into_iter()
            .map(|id| {
                Client::new(ClientConfig {
                    id,
                    f: self.f,
                    window: self.client_window,
                    retransmit_after: 10 * self.delta,
                    total: self.client_total,
                })
            })
            .collect()
    }
}

/// Partial configuration from a file or flags; `None` means "derive".
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub f: Option<u64>,
    pub n: Option<u64>,
    pub m: Option<u64>,
    pub k: Option<u64>,
    pub g: Option<u64>,
    pub c_min: Option<u64>,
    pub delta: Option<u64>,
    pub gst: Option<u64>,
    pub epoch_timer: Option<u64>,
    pub progress_timer: Option<u64>,
    pub change_timer: Option<u64>,
    pub clients: Option<u64>,
    pub client_window: Option<u64>,
    pub client_total: Option<u64>,
    pub adversary: Option<Profile>,
    pub seeds: Option<Vec<u64>>,
    pub clock: Option<ClockMode>,
    pub epochs: Option<u64>,
    pub max_events: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    /// Later sources win: merge `over` on top of `self`.
    pub fn layered(mut self, over: Overrides) -> Overrides {
        macro_rules! take {
            ($($field:ident),*) => { $( if over.$field.is_some() { self.$field = over.$field; } )* };
        }
        take!(
            f, n, m, k, g, c_min, delta, gst, epoch_timer, progress_timer, change_timer,
            clients, client_window, client_total, adversary, seeds, clock, epochs,
            max_events, out_dir
        );
        self
    }

    pub fn resolve(self) -> Result<ExperimentConfig, ConfigError> {
        let badly = |s: String| Err(ConfigError::Invalid(s));
        let f = match (self.f, self.n) {
            (Some(f), Some(n)) if n != 3 * f + 1 => {
                return badly(format!("n={n} contradicts f={f}: need n = 3f+1"));
            }
            (Some(f), _) => f,
            (None, Some(n)) => {
                if n < 4 || n % 3 != 1 {
                    return badly(format!("n={n} is not 3f+1 for any f ≥ 1"));
                }
                (n - 1) / 3
            }
            (None, None) => 1,
        };
        let n = 3 * f + 1;
        let m = self.m.unwrap_or(1);
        let k = self.k.unwrap_or(5);
        let g = self.g.unwrap_or(13.max(n));
        let c_min = self.c_min.unwrap_or_else(|| {
            // Floor near n², rounded up to the checkpoint interval.
            (n * n).div_ceil(k) * k
        });
        let delta = self.delta.unwrap_or(10);
        let epoch_timer = self.epoch_timer.unwrap_or(40 * c_min * n);
        let progress_timer = self.progress_timer.unwrap_or((4 * epoch_timer / c_min).max(1));
        let change_timer = self.change_timer.unwrap_or(10 * delta);
        let clients = self.clients.unwrap_or(2 * n);
        let cfg = ExperimentConfig {
            f,
            m,
            k,
            g,
            c_min,
            delta,
            gst: self.gst.unwrap_or(0),
            epoch_timer,
            progress_timer,
            change_timer,
            clients,
            client_window: self.client_window.unwrap_or(8),
            client_total: self.client_total,
            adversary: self.adversary.unwrap_or(Profile::None),
            seeds: self.seeds.unwrap_or_else(|| vec![1]),
            clock: self.clock.unwrap_or(ClockMode::Compute),
            epochs: self.epochs.unwrap_or(3),
            max_events: self.max_events.unwrap_or(30_000_000),
            out_dir: self.out_dir,
        };
        if cfg.f == 0 {
            return badly("f must be at least 1".into());
        }
        if cfg.m == 0 {
            return badly("m must be at least 1".into());
        }
        if cfg.k == 0 {
            return badly("k must be at least 1".into());
        }
        if cfg.g < n {
            return badly(format!("window g={} below n={n}", cfg.g));
        }
        if cfg.c_min < cfg.k || cfg.c_min % cfg.k != 0 {
            return badly(format!(
                "c_min={} must be a positive multiple of k={}",
                cfg.c_min, cfg.k
            ));
        }
        if cfg.delta == 0 {
            return badly("delta must be at least 1".into());
        }
        if cfg.seeds.is_empty() {
            return badly("at least one seed required".into());
        }
        if cfg.clients == 0 {
            return badly("at least one client required".into());
        }
        if cfg.client_window < 2 {
            return badly("client window below 2 cannot slide".into());
        }
        if cfg.epochs == 0 {
            return badly("epochs must be at least 1".into());
        }
        if let Profile::PartialInit(s) = cfg.adversary {
            let lo = cfg.f as usize + 1;
            let hi = 2 * cfg.f as usize;
            if s < lo || s > hi {
                return badly(format!("partial-init reach {s} outside [{lo}, {hi}]"));
            }
        }
        Ok(cfg)
    }
}

/// Parse a flat `key = value` file. `#` starts a comment; blank lines are
/// fine; keys match the flag names.
pub fn parse_file(text: &str) -> Result<Overrides, ConfigError> {
    let mut o = Overrides::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '=');
        let key = parts.next().unwrap().trim();
        let val = parts
            .next()
            .ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                reason: format!("expected key = value, got {line:?}"),
            })?
            .trim();
        let mut num = |field: &mut Option<u64>| -> Result<(), ConfigError> {
            *field = Some(val.parse().map_err(|_| ConfigError::Parse {
                line: i + 1,
                reason: format!("{key} wants an integer, got {val:?}"),
            })?);
            Ok(())
        };
        match key {
            "f" => num(&mut o.f)?,
            "n" => num(&mut o.n)?,
            "m" => num(&mut o.m)?,
            "k" => num(&mut o.k)?,
            "g" => num(&mut o.g)?,
            "c_min" => num(&mut o.c_min)?,
            "delta" => num(&mut o.delta)?,
            "gst" => num(&mut o.gst)?,
            "epoch_timer" => num(&mut o.epoch_timer)?,
            "progress_timer" => num(&mut o.progress_timer)?,
            "change_timer" => num(&mut o.change_timer)?,
            "clients" => num(&mut o.clients)?,
            "client_window" => num(&mut o.client_window)?,
            "client_total" => num(&mut o.client_total)?,
            "epochs" => num(&mut o.epochs)?,
            "max_events" => num(&mut o.max_events)?,
            "adversary" => {
                o.adversary = Some(Profile::parse(val).map_err(|reason| ConfigError::Parse {
                    line: i + 1,
                    reason,
                })?);
            }
            "clock" => {
                o.clock = Some(parse_clock(val).map_err(|reason| ConfigError::Parse {
                    line: i + 1,
                    reason,
                })?);
            }
            "seed" | "seeds" => {
                o.seeds = Some(parse_seeds(val).map_err(|reason| ConfigError::Parse {
                    line: i + 1,
                    reason,
                })?);
            }
            "out" => o.out_dir = Some(PathBuf::from(val)),
            _ => {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    reason: format!("unknown key {key:?}"),
                });
            }
        }
    }
    Ok(o)
}

pub fn parse_clock(s: &str) -> Result<ClockMode, String> {
    match s {
        "compute" => Ok(ClockMode::Compute),
        "latency" => Ok(ClockMode::Latency),
        _ => Err(format!("clock must be compute or latency, got {s:?}")),
    }
}

/// `7`, `1,5,9`, or `1..200` (both ends included).
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("cannot parse seed spec {s:?}");
    if let Some((a, b)) = s.split_once("..") {
        let lo: u64 = a.trim().parse().map_err(|_| bad())?;
        let hi: u64 = b.trim().parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(format!("empty seed range {s:?}"));
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let cfg = Overrides::default().resolve().unwrap();
        assert_eq!(cfg.f, 1);
        assert_eq!(cfg.n(), 4);
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.c_min, 20, "16 rounded up to the k=5 grid");
        assert_eq!(cfg.epoch_timer, 40 * 20 * 4);
        assert_eq!(cfg.progress_timer, 4 * cfg.epoch_timer / cfg.c_min);
        assert_eq!(cfg.change_timer, 100);
        assert_eq!(cfg.clients, 8);
    }

    #[test]
    fn n_and_f_must_agree() {
        let err = Overrides { n: Some(7), f: Some(1), ..Default::default() }.resolve();
        assert!(err.is_err());
        let cfg = Overrides { n: Some(7), ..Default::default() }.resolve().unwrap();
        assert_eq!(cfg.f, 2);
        assert!(Overrides { n: Some(6), ..Default::default() }.resolve().is_err());
    }

    #[test]
    fn capacity_must_sit_on_the_checkpoint_grid() {
        let err = Overrides { c_min: Some(23), ..Default::default() }.resolve();
        assert!(matches!(err, Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn file_parsing_and_layering() {
        let file = parse_file(
            "# experiment\n\
             f = 1\n\
             k = 50\n\
             c_min = 200   # grid-aligned\n\
             adversary = hang-leader\n\
             seeds = 1..4\n\
             clock = compute\n",
        )
        .unwrap();
        let flags = Overrides { k: Some(5), c_min: Some(20), ..Default::default() };
        let cfg = file.layered(flags).resolve().unwrap();
        assert_eq!(cfg.k, 5, "flag beat file");
        assert_eq!(cfg.c_min, 20);
        assert_eq!(cfg.adversary, Profile::HangLeader);
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4]);
    }

    #[test]
    fn file_rejects_unknown_keys_and_junk() {
        assert!(parse_file("frobnicate = 3").is_err());
        assert!(parse_file("f").is_err());
        assert!(parse_file("k = many").is_err());
        assert!(parse_file("adversary = chaotic").is_err());
    }

    #[test]
    fn seed_specs() {
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("1,5,9").unwrap(), vec![1, 5, 9]);
        assert_eq!(parse_seeds("3..6").unwrap(), vec![3, 4, 5, 6]);
        assert!(parse_seeds("6..3").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn client_ids_cover_every_bucket() {
        let cfg = Overrides::default().resolve().unwrap();
        let ids = cfg.client_ids();
        assert_eq!(ids.len(), 8);
        let buckets: std::collections::BTreeSet<u64> =
            ids.iter().map(|&c| crate::partition::bucket_of(c, 4)).collect();
        assert_eq!(buckets.len(), 4, "all four buckets have demand");
    }

    #[test]
    fn partial_init_reach_is_validated() {
        let bad = Overrides {
            adversary: Some(Profile::PartialInit(3)),
            ..Default::default()
        };
        assert!(bad.resolve().is_err());
        let ok = Overrides {
            adversary: Some(Profile::PartialInit(2)),
            ..Default::default()
        };
        assert_eq!(ok.resolve().unwrap().adversary, Profile::PartialInit(2));
    }
}
