//! Hops between stations, dwelling at each, and reports its travel log.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{decode_state, encode_state, AgentContext, Behavior, BehaviorAction, BehaviorError, BehaviorFactory};
use crate::wire::canonical_json;

/// Failed attempts at one hop before giving up.
pub const MAX_MOVE_ATTEMPTS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectivityState {
    pub dwell_ms: u64,
    pub remaining_hops: u64,
    /// Failed attempts at the current hop.
    #[serde(default)]
    pub failures: u32,
    /// Itinerary index of the hop in flight.
    #[serde(default)]
    pub target: Option<usize>,
    /// Earliest time of the next attempt after a failure.
    #[serde(default)]
    pub retry_at: u64,
    #[serde(default)]
    pub failure: Option<String>,
}

#[derive(Debug)]
pub struct ConnectivityTest {
    pub state: ConnectivityState,
}

impl ConnectivityTest {
    fn result(&self, ctx: &AgentContext) -> Vec<u8> {
        let mut out = json!({
            "remaining_hops": self.state.remaining_hops,
            "travel_log": ctx.travel_log_json(),
        });
        if let Some(f) = &self.state.failure {
            out["failure"] = Value::String(f.clone());
        }
        canonical_json(&out)
    }

    /// Next itinerary index after the cursor, skipping this station.
    fn next_stop(&self, ctx: &AgentContext) -> Option<usize> {
        let n = ctx.itinerary.len();
        (0..n).map(|k| (ctx.hop_index() + k) % n).find(|&i| ctx.itinerary[i] != ctx.endpoint)
    }
}

impl Behavior for ConnectivityTest {
    fn on_arrive(&mut self, _ctx: &mut AgentContext) -> Result<(), BehaviorError> {
        self.state.target = None;
        self.state.failures = 0;
        self.state.retry_at = 0;
        Ok(())
    }

    fn step(&mut self, ctx: &mut AgentContext) -> Result<BehaviorAction, BehaviorError> {
        if self.state.remaining_hops == 0 || self.state.failure.is_some() {
            return Ok(BehaviorAction::Finish(self.result(ctx)));
        }
        let now = ctx.now();
        if now < ctx.arrived_at().saturating_add(self.state.dwell_ms) || now < self.state.retry_at {
            return Ok(BehaviorAction::Continue);
        }
        let Some(i) = self.next_stop(ctx) else {
            self.state.failure = Some("itinerary has no other station".into());
            return Ok(BehaviorAction::Finish(self.result(ctx)));
        };
        self.state.target = Some(i);
        self.state.remaining_hops -= 1;
        ctx.set_hop_index((i + 1) % ctx.itinerary.len());
        Ok(BehaviorAction::MoveTo(ctx.itinerary[i].clone()))
    }

    fn on_move_aborted(&mut self, ctx: &mut AgentContext, reason: &str) {
        let Some(i) = self.state.target.take() else { return };
        self.state.remaining_hops += 1;
        self.state.failures += 1;
        ctx.set_hop_index(i);
        if self.state.failures >= MAX_MOVE_ATTEMPTS {
            self.state.failure =
                Some(format!("move to {} failed {} times: {reason}", ctx.itinerary[i], self.state.failures));
        } else {
            self.state.retry_at = ctx.now() + self.state.dwell_ms.max(100);
        }
    }

    fn on_recall(&mut self, ctx: &mut AgentContext) -> Vec<u8> {
        self.result(ctx)
    }

    fn save_state(&self) -> Vec<u8> {
        encode_state(&self.state)
    }
}

pub struct Factory;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    #[serde(default = "default_dwell")]
    dwell_ms: u64,
    hops: u64,
}

fn default_dwell() -> u64 {
    1000
}

impl BehaviorFactory for Factory {
    fn behavior_id(&self) -> &'static str {
        super::CONNECTIVITY_TEST
    }

    /// Params: `{hops, dwell_ms?}`. `hops` counts moves after arrival at the
    /// first station.
    fn initial_state(&self, params: &Value) -> Result<Vec<u8>, BehaviorError> {
        let p: Params = serde_json::from_value(params.clone()).map_err(BehaviorError::bad_params)?;
        Ok(encode_state(&ConnectivityState {
            dwell_ms: p.dwell_ms,
            remaining_hops: p.hops,
            failures: 0,
            target: None,
            retry_at: 0,
            failure: None,
        }))
    }

    fn restore(&self, state: &[u8]) -> Result<Box<dyn Behavior>, BehaviorError> {
        Ok(Box::new(ConnectivityTest { state: decode_state(state)? }))
    }
}
