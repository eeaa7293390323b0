//! Visits stations, scores files against a term query, and brings the ranked
//! hits home.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{decode_state, encode_state, AgentContext, Behavior, BehaviorAction, BehaviorError, BehaviorFactory};
use crate::wire::canonical_json;

const MAX_MOVE_ATTEMPTS: u32 = 4;
const RETRY_PAUSE_MS: u64 = 250;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub path: String,
    pub weight: u64,
    pub station_id: String,
}

/// Maximal runs of ASCII alphanumerics, lowercased.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_ascii_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_ascii_lowercase)
}

/// Sum over query terms of that term's token count in `text`.
pub fn weigh(text: &str, terms: &[String]) -> u64 {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for tok in tokenize(text) {
        *counts.entry(tok).or_default() += 1;
    }
    terms.iter().map(|t| counts.get(t).copied().unwrap_or(0)).sum()
}

/// Weight descending, then station and path ascending.
pub fn rank(hits: &mut [SearchHit]) {
    hits.sort_by(|a, b| {
        b.weight.cmp(&a.weight).then_with(|| a.station_id.cmp(&b.station_id)).then_with(|| a.path.cmp(&b.path))
    });
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchState {
    pub query_terms: Vec<String>,
    pub roots: Vec<String>,
    /// Where results are delivered; the first station when not given.
    pub origin: Option<String>,
    #[serde(default)]
    pub hits: Vec<SearchHit>,
    #[serde(default)]
    pub skipped: u64,
    #[serde(default)]
    pub unreachable: Vec<String>,
    #[serde(default)]
    pub failures: u32,
    #[serde(default)]
    pub retry_at: u64,
    #[serde(default)]
    pub stranded: bool,
}

#[derive(Debug)]
pub struct Search {
    pub state: SearchState,
}

impl Search {
    fn scan(&mut self, ctx: &AgentContext) {
        for root in &self.state.roots {
            let Ok(files) = ctx.fs.walk_files(root) else {
                continue;
            };
            for (path, host) in files {
                let text = match std::fs::read(&host).map(String::from_utf8) {
                    Ok(Ok(t)) => t,
                    _ => {
                        self.state.skipped += 1;
                        continue;
                    }
                };
                let weight = weigh(&text, &self.state.query_terms);
                if weight > 0 {
                    self.state.hits.push(SearchHit { path, weight, station_id: ctx.station_id.clone() });
                }
            }
        }
    }

    fn result(&self) -> Vec<u8> {
        let mut hits = self.state.hits.clone();
        rank(&mut hits);
        let mut out = json!({ "hits": hits, "skipped": self.state.skipped, "unreachable": self.state.unreachable });
        if self.state.stranded {
            out["failure"] = Value::String("could not return to origin".into());
        }
        canonical_json(&out)
    }
}

impl Behavior for Search {
    fn on_arrive(&mut self, ctx: &mut AgentContext) -> Result<(), BehaviorError> {
        if self.state.origin.is_none() {
            self.state.origin = Some(ctx.endpoint.clone());
        }
        self.state.failures = 0;
        self.state.retry_at = 0;
        Ok(())
    }

    fn step(&mut self, ctx: &mut AgentContext) -> Result<BehaviorAction, BehaviorError> {
        if ctx.now() < self.state.retry_at {
            return Ok(BehaviorAction::Continue);
        }
        let i = ctx.hop_index();
        if i < ctx.itinerary.len() {
            if ctx.itinerary[i] == ctx.endpoint {
                self.scan(ctx);
                ctx.set_hop_index(i + 1);
                self.state.failures = 0;
                return Ok(BehaviorAction::Continue);
            }
            return Ok(BehaviorAction::MoveTo(ctx.itinerary[i].clone()));
        }
        let origin = self.state.origin.clone().unwrap_or_else(|| ctx.endpoint.clone());
        if origin == ctx.endpoint || self.state.stranded {
            return Ok(BehaviorAction::Finish(self.result()));
        }
        Ok(BehaviorAction::MoveTo(origin))
    }

    fn on_move_aborted(&mut self, ctx: &mut AgentContext, _reason: &str) {
        self.state.failures += 1;
        self.state.retry_at = ctx.now() + RETRY_PAUSE_MS;
        if self.state.failures < MAX_MOVE_ATTEMPTS {
            return;
        }
        self.state.failures = 0;
        self.state.retry_at = 0;
        let i = ctx.hop_index();
        if i < ctx.itinerary.len() {
            self.state.unreachable.push(ctx.itinerary[i].clone());
            ctx.set_hop_index(i + 1);
        } else {
            self.state.stranded = true;
        }
    }

    fn on_recall(&mut self, _ctx: &mut AgentContext) -> Vec<u8> {
        self.result()
    }

    fn save_state(&self) -> Vec<u8> {
        encode_state(&self.state)
    }
}

pub struct Factory;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    terms: Vec<String>,
    #[serde(default = "default_roots")]
    roots: Vec<String>,
    #[serde(default)]
    origin: Option<String>,
}

fn default_roots() -> Vec<String> {
    vec![String::new()]
}

impl BehaviorFactory for Factory {
    fn behavior_id(&self) -> &'static str {
        super::SEARCH
    }

    /// Params: `{terms, roots?, origin?}`. Stations come from the itinerary.
    fn initial_state(&self, params: &Value) -> Result<Vec<u8>, BehaviorError> {
        let p: Params = serde_json::from_value(params.clone()).map_err(BehaviorError::bad_params)?;
        if p.terms.is_empty() {
            return Err(BehaviorError::bad_params("terms must not be empty"));
        }
        Ok(encode_state(&SearchState {
            query_terms: p.terms.iter().map(|t| t.to_ascii_lowercase()).collect(),
            roots: p.roots,
            origin: p.origin,
            hits: Vec::new(),
            skipped: 0,
            unreachable: Vec::new(),
            failures: 0,
            retry_at: 0,
            stranded: false,
        }))
    }

    fn restore(&self, state: &[u8]) -> Result<Box<dyn Behavior>, BehaviorError> {
        Ok(Box::new(Search { state: decode_state(state)? }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::testing::{ctx, fixture};

    #[test]
    fn weights() {
        let t = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(weigh("alpha beta alpha", &t(&["alpha"])), 2);
        assert_eq!(weigh("alpha beta alpha", &t(&["gamma"])), 0);
        assert_eq!(weigh("Alpha,alpha-ALPHA alphas", &t(&["alpha", "alphas"])), 4);
        assert_eq!(tokenize("héllo wörld x2").collect::<Vec<_>>(), ["h", "llo", "w", "rld", "x2"]);
    }

    #[test]
    fn ties_order_by_station_then_path() {
        let h = |s: &str, p: &str, w| SearchHit { station_id: s.into(), path: p.into(), weight: w };
        let mut hits = vec![h("B", "a", 1), h("A", "z", 1), h("C", "x", 3), h("A", "b", 1)];
        rank(&mut hits);
        assert_eq!(hits, [h("C", "x", 3), h("A", "b", 1), h("A", "z", 1), h("B", "a", 1)]);
    }

    #[test]
    fn scans_here_then_finishes_at_origin() {
        let fx = fixture();
        std::fs::create_dir(fx.fs.root().join("docs")).unwrap();
        std::fs::write(fx.fs.root().join("docs/one.txt"), "alpha beta alpha").unwrap();
        std::fs::write(fx.fs.root().join("docs/bin"), [0xff, 0xfe, 0x00]).unwrap();
        std::fs::write(fx.fs.root().join("docs/none.txt"), "gamma").unwrap();
        std::fs::write(fx.fs.root().join("top.txt"), "alpha").unwrap();
        let s = Factory.initial_state(&json!({ "terms": ["ALPHA"], "roots": ["docs"] })).unwrap();
        let mut a = Factory.restore(&s).unwrap();
        let mut c = ctx(&fx, "A", "a:1", vec!["a:1".into()]);
        a.on_arrive(&mut c).unwrap();
        assert_eq!(a.step(&mut c).unwrap(), BehaviorAction::Continue);
        let BehaviorAction::Finish(out) = a.step(&mut c).unwrap() else { panic!() };
        let v: Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(v["hits"], json!([{ "path": "docs/one.txt", "station_id": "A", "weight": 2 }]));
        assert_eq!(v["skipped"], 1);
    }

    #[test]
    fn heads_home_after_last_stop() {
        let fx = fixture();
        let s = Factory.initial_state(&json!({ "terms": ["x"], "origin": "o:1" })).unwrap();
        let mut a = Factory.restore(&s).unwrap();
        let mut c = ctx(&fx, "B", "b:1", vec!["b:1".into()]);
        a.on_arrive(&mut c).unwrap();
        assert_eq!(a.step(&mut c).unwrap(), BehaviorAction::Continue);
        assert_eq!(a.step(&mut c).unwrap(), BehaviorAction::MoveTo("o:1".into()));
    }
}
