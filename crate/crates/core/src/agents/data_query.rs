//! Queries the CSV tables of whichever station it currently resides on.
//!
//! Commands: `LIST_CATALOG` → `{tables: [{name, columns}]}` and
//! `QUERY {table, columns?, predicate?}` → `{columns, rows}`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::tables::{Predicate, QueryError, TableInfo};
use super::{
    decode_state, encode_state, str_field, AgentContext, Behavior, BehaviorAction, BehaviorError, BehaviorFactory,
    CommandOutcome,
};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataQueryState {
    /// Catalog of the current station, taken on arrival.
    #[serde(default)]
    pub catalog: Vec<TableInfo>,
    #[serde(default)]
    pub queries_run: u64,
}

#[derive(Debug, Default)]
pub struct DataQuery {
    pub state: DataQueryState,
}

impl From<QueryError> for BehaviorError {
    fn from(e: QueryError) -> Self {
        BehaviorError::new(e.code(), &e)
    }
}

impl Behavior for DataQuery {
    fn on_arrive(&mut self, ctx: &mut AgentContext) -> Result<(), BehaviorError> {
        self.state.catalog = ctx.tables.list();
        Ok(())
    }

    fn step(&mut self, _ctx: &mut AgentContext) -> Result<BehaviorAction, BehaviorError> {
        Ok(BehaviorAction::Continue)
    }

    fn handle_command(&mut self, ctx: &mut AgentContext, cmd: &Value) -> Result<CommandOutcome, BehaviorError> {
        match str_field(cmd, "cmd")? {
            "LIST_CATALOG" => Ok(CommandOutcome::Reply(json!({ "tables": self.state.catalog }))),
            "QUERY" => {
                let table = str_field(cmd, "table")?;
                if !self.state.catalog.iter().any(|t| t.name == table) {
                    return Err(QueryError::UnknownTable(table.to_string()).into());
                }
                let columns: Vec<String> = match cmd.get("columns") {
                    None | Some(Value::Null) => Vec::new(),
                    Some(v) => serde_json::from_value(v.clone())
                        .map_err(|e| BehaviorError::new("BAD_COMMAND", format!("columns: {e}")))?,
                };
                let predicate = Predicate::from_json(cmd.get("predicate").unwrap_or(&Value::Null))?;
                let result = ctx.tables.query(table, &columns, &predicate)?;
                self.state.queries_run += 1;
                Ok(CommandOutcome::Reply(json!(result)))
            }
            other => Err(BehaviorError::unsupported(other)),
        }
    }

    fn save_state(&self) -> Vec<u8> {
        encode_state(&self.state)
    }
}

pub struct Factory;

impl BehaviorFactory for Factory {
    fn behavior_id(&self) -> &'static str {
        super::DATA_QUERY
    }

    fn initial_state(&self, params: &Value) -> Result<Vec<u8>, BehaviorError> {
        match params {
            Value::Null => {}
            Value::Object(m) if m.is_empty() => {}
            _ => return Err(BehaviorError::bad_params("data-query takes no parameters")),
        }
        Ok(encode_state(&DataQueryState::default()))
    }

    fn restore(&self, state: &[u8]) -> Result<Box<dyn Behavior>, BehaviorError> {
        Ok(Box::new(DataQuery { state: decode_state(state)? }))
    }
}
