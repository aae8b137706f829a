//! Closed-loop clients.
//!
//! A client broadcasts each request to every replica (it cannot know which
//! leader currently serves its bucket without tracking epochs, and doesn't
//! need to), then waits for `f+1` distinct replicas to send the same
//! response for the same request hash. Timestamps increase strictly; a
//! watermark window caps how far the client runs ahead of its oldest
//! unanswered request, and the window slides by half once the older half is
//! answered.
//!
//! Clients are always correct here. Byzantine clients can only present bad
//! authentication tags or reused timestamps, both of which replicas drop in
//! admission checks that the replica test suite covers directly.

use crate::types::{auth_tag, ClientId, Digest, ProtocolMessage, ReplicaId, Request};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub id: ClientId,
    pub f: u64,
    /// Maximum distance between the oldest unanswered timestamp and the
    /// newest issued one.
    pub window: u64,
    /// Re-broadcast an unanswered request after this much silence.
    pub retransmit_after: u64,
    /// Stop issuing after this many requests; `None` keeps the loop closed
    /// forever.
    pub total: Option<u64>,
}

struct Flight {
    request: Request,
    auth: Digest,
    issued_at: u64,
    last_sent: u64,
    /// response -> distinct replicas that sent it for this request.
    tally: BTreeMap<Digest, BTreeSet<ReplicaId>>,
    done: bool,
}

/// One accepted request, for latency metrics.
#[derive(Clone, Copy, Debug)]
pub struct Completion {
    pub timestamp: u64,
    pub issued_at: u64,
    pub completed_at: u64,
}

#[derive(Default, Clone, Debug)]
pub struct ClientStats {
    pub issued: u64,
    pub completed: u64,
    pub retransmits: u64,
    pub completions: Vec<Completion>,
}

pub struct Client {
    cfg: ClientConfig,
    /// All timestamps ≤ `low` are completed.
    low: u64,
    next_ts: u64,
    inflight: BTreeMap<u64, Flight>,
    pub stats: ClientStats,
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Self {
        assert!(cfg.window >= 2, "window below 2 cannot slide");
        Client { cfg, low: 0, next_ts: 1, inflight: BTreeMap::new(), stats: ClientStats::default() }
    }

    pub fn id(&self) -> ClientId {
        self.cfg.id
    }

    /// Requests issued but not yet accepted.
    pub fn pending(&self) -> usize {
        self.inflight.values().filter(|fl| !fl.done).count()
    }

    pub fn done(&self) -> bool {
        match self.cfg.total {
            Some(t) => self.stats.completed == t,
            None => false,
        }
    }

    /// Issue new requests up to the window and retransmit overdue ones.
    /// Returned messages go to every replica.
    pub fn wake(&mut self, now: u64) -> Vec<ProtocolMessage> {
        let mut out = Vec::new();
        for fl in self.inflight.values_mut() {
            if !fl.done && now >= fl.last_sent + self.cfg.retransmit_after {
                fl.last_sent = now;
                self.stats.retransmits += 1;
                out.push(request_msg(&fl.request, fl.auth));
            }
        }
        while self.next_ts <= self.low + self.cfg.window && self.may_issue() {
            let ts = self.next_ts;
            self.next_ts += 1;
            self.stats.issued += 1;
            // Payloads are empty; identity comes from (client, timestamp).
            let request = Request::new(self.cfg.id, Vec::new(), ts);
            let auth = auth_tag("req", self.cfg.id.0, &request.request_hash);
            out.push(request_msg(&request, auth));
            self.inflight.insert(
                ts,
                Flight {
                    request,
                    auth,
                    issued_at: now,
                    last_sent: now,
                    tally: BTreeMap::new(),
                    done: false,
                },
            );
        }
        out
    }

    fn may_issue(&self) -> bool {
        match self.cfg.total {
            Some(t) => self.stats.issued < t,
            None => true,
        }
    }

    /// Feed one answer. `from` is the transport-level sender, which the
    /// network attributes and a byzantine replica cannot spoof; the claimed
    /// replica id inside the message must match it. Returns the timestamp on
    /// acceptance.
    pub fn on_answer(&mut self, from: ReplicaId, msg: &ProtocolMessage, now: u64) -> Option<u64> {
        let ProtocolMessage::Answer { replica, response, r_hash, auth, .. } = msg else {
            return None;
        };
        if *replica != from || *auth != auth_tag("ans", replica.0, r_hash) {
            return None;
        }
        let need = (self.cfg.f + 1) as usize;
        let ts = self.inflight.iter().find_map(|(&ts, fl)| {
            (!fl.done && fl.request.request_hash == *r_hash).then_some(ts)
        })?;
        let fl = self.inflight.get_mut(&ts).unwrap();
        let voters = fl.tally.entry(*response).or_default();
        voters.insert(from);
        if voters.len() < need {
            return None;
        }
        fl.done = true;
        self.stats.completed += 1;
        self.stats.completions.push(Completion {
            timestamp: ts,
            issued_at: fl.issued_at,
            completed_at: now,
        });
        self.slide();
        Some(ts)
    }

    /// Advance the watermark in half-window hops once the older half of the
    /// window is fully answered.
    fn slide(&mut self) {
        let half = self.cfg.window / 2;
        loop {
            let half_done = (self.low + 1..=self.low + half)
                .all(|ts| self.inflight.get(&ts).map(|fl| fl.done).unwrap_or(false));
            if !half_done {
                return;
            }
            for ts in self.low + 1..=self.low + half {
                self.inflight.remove(&ts);
            }
            self.low += half;
        }
    }
}

fn request_msg(request: &Request, auth: Digest) -> ProtocolMessage {
    ProtocolMessage::RequestMsg {
        client: request.client,
        request: request.clone(),
        r_hash: request.request_hash,
        auth,
    }
}
